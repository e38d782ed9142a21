"""Command-line entry points: ``romnet <subcommand>`` and ``hfm-run``."""

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import ORDER, ArtifactStore, PipelineError, run_all, run_single_sample, run_stage

logger = logging.getLogger("romnet")

_SEED_FOR = {"doe": "doe_seed", "cluster": "cluster_seed", "train-classifier": "cv_seed",
             "train-gappy": "cv_seed", "uq": "mc_seed", "validate": "validate_seed"}


def build_parser():
    p = argparse.ArgumentParser(prog="romnet", description="ROM-net offline training and Monte-Carlo UQ")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ORDER + ("all", "status"):
        s = sub.add_parser(name, help=f"run the {name} stage" if name in ORDER else None)
        s.add_argument("--config", default=None, help="YAML config, or 'default' / 'tiny'")
        s.add_argument("--out", default="romnet-artifacts", help="artifact store root")
        s.add_argument("--seed", type=int, default=None, help="override the seed read by this stage")
        s.add_argument("--workers", type=int, default=None)
        s.add_argument("--force", action="store_true", help="recompute even if up to date")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "hfm-run":
            s.add_argument("--sample", type=int, default=None, help="solve only this DoE sample")
        if name == "uq":
            s.add_argument("--draws", type=int, default=None)
        if name == "validate":
            s.add_argument("--n-new", type=int, default=None)
    return p


def _apply_overrides(cfg, args):
    if args.workers is not None:
        cfg.workers = args.workers
    if getattr(args, "draws", None) is not None:
        cfg.uq.draws = args.draws
    if getattr(args, "n_new", None) is not None:
        cfg.validate.n_new = args.n_new
    if args.seed is not None:
        stages = ORDER if args.command == "all" else (args.command,)
        for s in stages:
            if s in _SEED_FOR:
                setattr(cfg.seeds, _SEED_FOR[s], args.seed)
    cfg.check()
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        store = ArtifactStore(args.out)
        if args.command == "status":
            for s in ORDER:
                st, why = store.status(s, cfg)
                print(f"{s:<18}{st:<9}{why}")
            return 0
        if args.command == "all":
            done = run_all(cfg, store, force=args.force)
            print("ran: " + (", ".join(done) if done else "nothing, all stages up to date"))
        elif getattr(args, "sample", None) is not None:
            print(run_single_sample(cfg, store, args.sample))
        else:
            run_stage(args.command, cfg, store, force=args.force)
        return 0
    except PipelineError as exc:
        print(f"romnet: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ConfigError, OSError) as exc:
        print(f"romnet: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.debug("unhandled error", exc_info=True)
        print(f"romnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def hfm_run_main(argv=None):
    """Same as ``romnet hfm-run``."""
    return main(["hfm-run"] + list(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    sys.exit(main())
