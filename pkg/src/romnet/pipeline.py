"""Artifact store and stage graph of the offline and online workflow.

Stages, in order: mesh, thermal-build, doe, hfm-run, cluster, train-rom,
train-classifier, train-gappy, uq, validate, report.  Each stage writes into
its own directory of the store together with ``manifest.json``, which records
the hash of the config keys the stage reads, the fingerprints of its upstream
stages and the sha256 of every output file.  A stage is stale when any of
these no longer matches.
"""

from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
import fcntl
import glob
import hashlib
import json
import logging
import multiprocessing as mp
import os
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import cluster as cl
from .doe import maxproj_lhs, sobol, to_loading_coords
from .gappy import GappySurrogate, gappy_pod, train_gappy_surrogate
from .hfm import ConvergenceError, HighFidelityModel, Trajectory
from .io import atomic_write_text, file_digest, load_arrays, save_arrays
from .material import MaterialIntegrationError
from .mesh import Mesh, generate_toy_blade_mesh
from .recommend import (ElasticNetLogisticRegression, ModelRecommender, build_recommender,
                        classification_report_table, format_report)
from .rom import DUAL_NAMES, LocalROM, ReducedBasis, ReducedSolver, dof_weights, train_local_rom
from .thermal import ThermalModel, build_thermal_model, sample_temperature
from .uq import (INDICATOR_LABELS, ROMNet, ZoneOfInterest, error_indicators, mc_coordinates,
                 run_monte_carlo, von_mises_voigt, write_uq_report, zone_of_interest)

logger = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    exit_code = 1


class MissingArtifactError(PipelineError):
    pass


class StaleArtifactError(PipelineError):
    exit_code = 2


@dataclass(frozen=True)
class Stage:
    name: str
    directory: str
    upstream: tuple
    sections: tuple         # config keys read by the stage


STAGES = {s.name: s for s in [
    Stage("mesh", "mesh", (), ("blade",)),
    Stage("thermal-build", "thermal", ("mesh",), ("blade", "thermal")),
    Stage("doe", "doe", (), ("doe", "seeds.doe_seed")),
    Stage("hfm-run", "snapshots", ("mesh", "thermal-build", "doe"),
          ("material", "schedule", "solver", "uq.zone_fraction")),
    Stage("cluster", "clusters", ("hfm-run",),
          ("cluster", "rom.snapshots_per_cluster", "seeds.cluster_seed")),
    Stage("train-rom", "roms", ("mesh", "hfm-run", "cluster"),
          ("rom.primal_tol", "rom.dual_tol", "rom.ecm_tol")),
    Stage("train-classifier", "classifier", ("mesh", "thermal-build", "hfm-run", "cluster"),
          ("classifier", "seeds.cv_seed")),
    Stage("train-gappy", "gappy", ("hfm-run", "cluster", "train-rom"), ("gappy", "seeds.cv_seed")),
    Stage("uq", "uq", ("hfm-run", "train-rom", "train-classifier", "train-gappy"),
          ("uq", "seeds.mc_seed")),
    Stage("validate", "validation", ("hfm-run", "train-rom", "train-classifier", "train-gappy"),
          ("validate", "seeds.validate_seed")),
    Stage("report", "report", ("cluster", "train-rom", "train-classifier", "train-gappy", "uq", "validate"), ()),
]}
ORDER = tuple(STAGES)


# --------------------------------------------------------------------------
# store

class ArtifactStore:
    """Directory tree with one sub-directory and manifest per stage."""

    def __init__(self, root):
        self.root = os.path.abspath(os.fspath(root))
        os.makedirs(self.root, exist_ok=True)

    def path(self, stage, *parts):
        return os.path.join(self.root, STAGES[stage].directory, *parts)

    def manifest_path(self, stage):
        return self.path(stage, "manifest.json")

    def manifest(self, stage):
        try:
            with open(self.manifest_path(stage)) as f:
                return json.load(f)
        except FileNotFoundError:
            return None

    @contextmanager
    def lock(self, stage):
        os.makedirs(self.path(stage), exist_ok=True)
        with open(self.path(stage, ".lock"), "w") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def status(self, stage, cfg, _seen=None):
        """``("ok" | "missing" | "stale", reason)``."""
        m = self.manifest(stage)
        if m is None:
            return "missing", f"no manifest for '{stage}'"
        if m.get("config_hash") != cfg.hash(STAGES[stage].sections):
            return "stale", f"config keys read by '{stage}' changed"
        for u in STAGES[stage].upstream:
            um = self.manifest(u)
            if um is None:
                return "stale", f"upstream '{u}' is missing"
            if m["upstream"].get(u) != um.get("fingerprint"):
                return "stale", f"upstream '{u}' changed since '{stage}' was built"
            st, why = self.status(u, cfg)
            if st != "ok":
                return "stale", f"upstream {why}"
        for rel, digest in m["outputs"].items():
            p = self.path(stage, rel)
            if not os.path.exists(p):
                return "stale", f"output {rel} of '{stage}' is missing"
            if os.path.getmtime(p) > m.get("written", 0) + 1e-3 and file_digest(p) != digest:
                return "stale", f"output {rel} of '{stage}' was modified"
        return "ok", ""

    def write_manifest(self, stage, cfg, outputs, elapsed):
        up = {u: self.manifest(u)["fingerprint"] for u in STAGES[stage].upstream}
        digests = {rel: file_digest(self.path(stage, rel)) for rel in sorted(outputs)}
        fp = hashlib.sha256(json.dumps(digests, sort_keys=True).encode()).hexdigest()
        m = {"stage": stage, "config_hash": cfg.hash(STAGES[stage].sections),
             "config_keys": list(STAGES[stage].sections), "upstream": up, "outputs": digests,
             "fingerprint": fp, "elapsed": elapsed, "written": time.time()}
        atomic_write_text(self.manifest_path(stage), json.dumps(m, indent=1, sort_keys=True) + "\n")
        return m


def check_upstream(stage, cfg, store):
    for u in STAGES[stage].upstream:
        st, why = store.status(u, cfg)
        if st == "missing":
            raise MissingArtifactError(f"'{stage}' needs the output of '{u}' ({why}): run `romnet {u}` first")
        if st == "stale":
            raise StaleArtifactError(f"'{stage}' depends on a stale '{u}' ({why}): rerun `romnet {u}`")


def run_stage(stage, cfg, store, force=False, workers=None):
    """Run one stage if it is missing, stale or forced; returns its manifest."""
    if stage not in STAGES:
        raise PipelineError(f"unknown stage {stage!r}; choose from {', '.join(ORDER)}")
    check_upstream(stage, cfg, store)
    if not force and store.status(stage, cfg)[0] == "ok":
        logger.info("%s: up to date, skipped", stage)
        return store.manifest(stage)
    workers = cfg.workers if workers is None else workers
    with store.lock(stage):
        logger.info("%s: running", stage)
        start = time.perf_counter()
        outputs = _RUNNERS[stage](cfg, store, workers)
        elapsed = time.perf_counter() - start
        m = store.write_manifest(stage, cfg, outputs, elapsed)
    logger.info("%s: done in %.1f s", stage, elapsed)
    return m


def run_all(cfg, store, force=False, workers=None, until=None):
    done = []
    for s in ORDER:
        if force or store.status(s, cfg)[0] != "ok":
            run_stage(s, cfg, store, force=True, workers=workers)
            done.append(s)
        if s == until:
            break
    return done


# --------------------------------------------------------------------------
# loaders

def load_mesh(store):
    return Mesh.from_arrays(load_arrays(store.path("mesh", "mesh.bin")))


def load_thermal(store):
    return ThermalModel.from_arrays(load_arrays(store.path("thermal-build", "model.bin")))


def make_hfm(cfg, mesh):
    s = cfg.solver
    return HighFidelityModel(mesh, cfg.material, cfg.schedule, s.newton_tol, s.newton_atol,
                             s.max_newton, s.max_bisections)


def load_doe(store):
    return load_arrays(store.path("doe", "designs.bin"))


def load_summary(store):
    return load_arrays(store.path("hfm-run", "summary.bin"))


def load_trajectory(store, sample_id):
    return Trajectory.from_arrays(load_arrays(store.path("hfm-run", "traj", f"sample_{sample_id:04d}.bin")))


def load_zone(store):
    a = load_arrays(store.path("hfm-run", "reference.bin"))
    return ZoneOfInterest(a["zone"], float(a["zone_fraction"][0]))


def load_dictionary(store):
    return load_arrays(store.path("cluster", "dictionary.bin"))


def load_roms(store):
    roms = {}
    for p in sorted(glob.glob(store.path("train-rom", "cluster_*.bin"))):
        r = LocalROM.from_arrays(load_arrays(p))
        roms[r.cluster] = r
    return roms


def load_recommender(store):
    a = load_arrays(store.path("train-classifier", "model.bin"))
    clf = ElasticNetLogisticRegression(float(a["hyper"][0]), float(a["hyper"][1]))
    clf.coef_, clf.intercept_, clf.classes_ = a["coef"], a["intercept"], a["classes"]
    clf.n_features_in_ = a["coef"].shape[1]
    return ModelRecommender(a["nodes"], clf, a["relevance"], a["preselected"])


def load_gappy(store, roms):
    out = {}
    for k in roms:
        a = load_arrays(store.path("train-gappy", f"cluster_{k}.bin"))
        out[k] = {}
        for name in DUAL_NAMES:
            basis = ReducedBasis.from_arrays(a, f"{name}.basis.")
            sur = GappySurrogate.from_arrays(a, f"{name}.") if f"{name}.coef" in a else None
            out[k][name] = (sur, basis)
    return out


def load_romnet(cfg, store):
    mesh = load_mesh(store)
    hfm = make_hfm(cfg, mesh)
    roms = load_roms(store)
    s = cfg.solver
    return ROMNet(hfm, load_thermal(store), load_recommender(store), roms, load_gappy(store, roms),
                  {"newton_tol": s.newton_tol, "newton_atol": s.newton_atol, "max_newton": s.max_newton,
                   "max_bisections": s.max_bisections})


def ip_positions(mesh):
    return mesh.nodes[mesh.tets].mean(axis=1)


# --------------------------------------------------------------------------
# stages

def _stage_mesh(cfg, store, workers):
    mesh = generate_toy_blade_mesh(cfg.blade)
    save_arrays(store.path("mesh", "mesh.bin"), mesh.to_arrays(), {"blade": cfg.blade.to_dict()})
    return ["mesh.bin", "mesh.bin.txt"]


def _stage_thermal(cfg, store, workers):
    mesh = load_mesh(store)
    tm = build_thermal_model(mesh, cfg.blade, cfg.thermal)
    save_arrays(store.path("thermal-build", "model.bin"), tm.to_arrays(), {"thermal": cfg.thermal.to_dict()})
    return ["model.bin", "model.bin.txt"]


def _stage_doe(cfg, store, workers):
    d = cfg.doe
    mp_ = maxproj_lhs(d.maxproj, 5, seed=cfg.seeds.doe_seed, iters=d.maxproj_iters).points
    sb = sobol(d.sobol, 5).points
    pts = np.vstack([mp_, sb])
    coords = to_loading_coords(pts)
    source = np.r_[np.zeros(d.maxproj, dtype=np.int64), np.ones(d.sobol, dtype=np.int64)]
    save_arrays(store.path("doe", "designs.bin"), {"points": pts, "coords": coords, "source": source},
                {"maxproj": d.maxproj, "sobol": d.sobol})
    rows = ["sample,dataset,chi0,chi1,chi2,chi3,chi4,Y0,Y1,Y2,Y3,Y4"]
    for i in range(pts.shape[0]):
        rows.append(",".join([str(i), "maxproj" if source[i] == 0 else "sobol"]
                             + [f"{v:.10g}" for v in pts[i]] + [f"{v:.10g}" for v in coords[i]]))
    atomic_write_text(store.path("doe", "designs.csv"), "\n".join(rows) + "\n")
    return ["designs.bin", "designs.bin.txt", "designs.csv"]


_HFM = None
_TM = None


def _hfm_job(args):
    i, coords, path = args
    try:
        tr = _HFM.solve_cycle(sample_temperature(_TM, coords))
    except (ConvergenceError, MaterialIntegrationError) as exc:
        return i, None, str(exc)
    if path is not None:
        save_arrays(path, tr.to_arrays())
    return i, tr, None


def _pool_map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        with threadpool_limits(1):
            return [fn(j) for j in jobs]
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(workers, mp_context=ctx, initializer=threadpool_limits, initargs=(1,)) as ex:
        return list(ex.map(fn, jobs, chunksize=1))


def _stage_hfm(cfg, store, workers):
    global _HFM, _TM
    mesh, tm, doe = load_mesh(store), load_thermal(store), load_doe(store)
    _HFM, _TM = make_hfm(cfg, mesh), tm
    os.makedirs(store.path("hfm-run", "traj"), exist_ok=True)
    coords = doe["coords"]
    n = coords.shape[0]
    jobs = [(i, coords[i], store.path("hfm-run", "traj", f"sample_{i:04d}.bin")) for i in range(n)]
    ref_coords = np.r_[1.0, np.zeros(tm.n_modes)]
    jobs.append((-1, ref_coords, None))
    results = _pool_map(_hfm_job, jobs, workers)
    peak = cfg.schedule.peak_step
    ok = np.zeros(n, dtype=np.int64)
    p_final = np.zeros((n, mesh.n_ip))
    sigma_peak = np.zeros((n, mesh.n_ip, 6))
    u_peak = np.zeros((n, 3 * mesh.n_nodes))
    wall = np.full(n, np.nan)
    outputs, failures = [], []
    ref = None
    for i, tr, err in results:
        if i < 0:
            if tr is None:
                raise PipelineError(f"reference loading failed: {err}")
            ref = tr
            continue
        if tr is None:
            failures.append(f"sample {i}: {err}")
            logger.warning("HFM failed on sample %d: %s", i, err)
            continue
        ok[i] = 1
        p_final[i], sigma_peak[i], u_peak[i], wall[i] = tr.p_cum[-1], tr.sigma[peak], tr.u[peak], tr.wall_time
        outputs += [f"traj/sample_{i:04d}.bin", f"traj/sample_{i:04d}.bin.txt"]
    _HFM = _TM = None
    zone = zone_of_interest(ref.p_cum[-1], cfg.uq.zone_fraction)
    save_arrays(store.path("hfm-run", "summary.bin"),
                {"ok": ok, "p_final": p_final, "sigma_peak": sigma_peak, "u_peak": u_peak, "wall_time": wall,
                 "source": doe["source"], "coords": coords}, {"failures": failures})
    save_arrays(store.path("hfm-run", "reference.bin"),
                {"p_final": ref.p_cum[-1], "sigma_peak": ref.sigma[peak], "zone": zone.ips,
                 "zone_fraction": np.array([zone.fraction]), "coords": ref_coords})
    logger.info("hfm-run: %d/%d converged, mean wall time %.2f s, zone of %d points", ok.sum(), n,
                np.nanmean(wall), zone.ips.size)
    return outputs + ["summary.bin", "summary.bin.txt", "reference.bin", "reference.bin.txt"]


def run_single_sample(cfg, store, sample_id):
    """Solve one DoE sample with the HFM and write its trajectory; returns the path.

    The file is the one the full ``hfm-run`` stage writes. Its wall time
    differs from run to run, so replacing a stage output makes ``status``
    report that stage as modified.
    """
    check_upstream("hfm-run", cfg, store)
    doe = load_doe(store)
    n = doe["coords"].shape[0]
    if not 0 <= sample_id < n:
        raise PipelineError(f"sample id {sample_id} out of range 0..{n - 1}")
    hfm = make_hfm(cfg, load_mesh(store))
    try:
        tr = hfm.solve_cycle(sample_temperature(load_thermal(store), doe["coords"][sample_id]))
    except (ConvergenceError, MaterialIntegrationError) as exc:
        raise PipelineError(f"HFM failed on sample {sample_id}: {exc}") from exc
    os.makedirs(store.path("hfm-run", "traj"), exist_ok=True)
    path = store.path("hfm-run", "traj", f"sample_{sample_id:04d}.bin")
    save_arrays(path, tr.to_arrays())
    logger.info("hfm-run: sample %d done in %.2f s (%d Newton iterations)", sample_id, tr.wall_time,
                int(np.sum(tr.newton_iterations)))
    return path


def _variant_fields(summary, mesh, variant):
    if variant == "goal":
        return summary["p_final"], mesh.volumes
    return summary["u_peak"], dof_weights(mesh)


def _stage_cluster(cfg, store, workers):
    mesh, s = load_mesh(store), load_summary(store)
    ok = s["ok"].astype(bool)
    source = s["source"]
    train = np.flatnonzero(ok & (source == 0))
    test = np.flatnonzero(ok & (source == 1))
    y0 = s["coords"][:, 0].astype(np.int64)
    out = {}
    for variant in ("goal", "method"):
        F, w = _variant_fields(s, mesh, variant)
        nz = np.sqrt(np.sum(F[train] ** 2 * w, axis=1)) > 0
        if not nz.all():
            logger.warning("%s variant: %d training fields are zero and left out", variant, int((~nz).sum()))
        members = train[nz]
        D = cl.dissimilarity_matrix(F[members], w)
        d = cl.k_medoids(D, cfg.cluster.K, cfg.cluster.n_init, cfg.seeds.cluster_seed)
        Z, rel = cl.mds_smacof(D, 2)
        out[variant] = (members, D, d, Z, rel)
    members, D, d, Z, rel = out[cfg.cluster.variant]
    F, w = _variant_fields(s, mesh, cfg.cluster.variant)
    K = cfg.cluster.K
    m = cfg.rom.snapshots_per_cluster
    selected = {}
    for k in range(K):
        idx = np.flatnonzero(d.labels == k)
        mk = min(m, idx.size)
        if mk < m:
            logger.warning("cluster %d has %d members, fewer than %d snapshots requested", k, idx.size, m)
        sel = cl.maximin_select(D, idx, mk, d.medoids[k])
        selected[k] = members[sel]
    medoid_fields = F[members[d.medoids]]
    test_labels = np.array([cl.label_by_medoid(F[i], medoid_fields, w) if np.any(F[i]) else -1
                            for i in test], dtype=np.int64)
    arrays = {"train": members, "labels": d.labels, "medoids": members[d.medoids], "D": D, "mds": Z,
              "mds_stress": np.array([rel]), "cost": np.array([d.cost]), "test": test,
              "test_labels": test_labels}
    for k in range(K):
        arrays[f"selected_{k}"] = selected[k]
    mis = {}
    for variant, (mem, _, dv, _, relv) in out.items():
        mis[variant] = cl.mislabel_rate(dv.labels, y0[mem])
        arrays[f"{variant}.labels"] = dv.labels
        arrays[f"{variant}.train"] = mem
        arrays[f"{variant}.mislabel"] = np.array([mis[variant], relv])
    save_arrays(store.path("cluster", "dictionary.bin"), arrays, {"variant": cfg.cluster.variant})
    rows = ["sample,Y0,label,mds_x,mds_y,medoid,selected"]
    sel_all = set(np.concatenate(list(selected.values())).tolist())
    for j, i in enumerate(members):
        rows.append(f"{i},{y0[i]},{d.labels[j]},{Z[j, 0]:.8g},{Z[j, 1]:.8g},{int(i in arrays['medoids'])},"
                    f"{int(i in sel_all)}")
    atomic_write_text(store.path("cluster", "clusters.csv"), "\n".join(rows) + "\n")
    txt = [f"variant {cfg.cluster.variant}", f"K {K}", f"cost {d.cost:.6g}",
           f"medoids {members[d.medoids].tolist()}", f"cluster sizes {np.bincount(d.labels, minlength=K).tolist()}",
           f"MDS relative stress {rel:.4f}"]
    for variant in out:
        txt.append(f"{variant}-oriented mislabel rate vs Y0: {mis[variant]:.4f} "
                   f"(MDS relative stress {out[variant][4]:.4f})")
    txt.append(f"sobol labels by closest medoid: {np.bincount(test_labels[test_labels >= 0], minlength=K).tolist()}")
    atomic_write_text(store.path("cluster", "summary.txt"), "\n".join(txt) + "\n")
    logger.info("cluster: sizes %s, mislabel %.3f", np.bincount(d.labels, minlength=K).tolist(),
                mis[cfg.cluster.variant])
    return ["dictionary.bin", "dictionary.bin.txt", "clusters.csv", "summary.txt"]


def _stage_rom(cfg, store, workers):
    mesh, dic = load_mesh(store), load_dictionary(store)
    hfm = make_hfm(cfg, mesh)
    outputs, lines = [], []
    k = 0
    while f"selected_{k}" in dic:
        ids = dic[f"selected_{k}"]
        trs = [load_trajectory(store, int(i)) for i in ids]
        rom = train_local_rom(hfm, trs, k, ids, cfg.rom.primal_tol, cfg.rom.dual_tol, cfg.rom.ecm_tol)
        save_arrays(store.path("train-rom", f"cluster_{k}.bin"), rom.to_arrays())
        outputs += [f"cluster_{k}.bin", f"cluster_{k}.bin.txt"]
        lines.append(f"cluster {k}: {len(ids)} snapshots, N = {rom.primal.n_modes}, "
                     f"RID {len(rom.quadrature)} points, ECM residual {rom.quadrature.residual:.3e}, "
                     + ", ".join(f"{n} {b.n_modes}" for n, b in rom.duals.items()))
        k += 1
    atomic_write_text(store.path("train-rom", "summary.txt"), "\n".join(lines) + "\n")
    return outputs + ["summary.txt"]


def _stage_classifier(cfg, store, workers):
    mesh, tm, dic = load_mesh(store), load_thermal(store), load_dictionary(store)
    s = load_summary(store)
    c = cfg.classifier
    te = dic["test"][dic["test_labels"] >= 0]
    y_tr = dic["test_labels"][dic["test_labels"] >= 0]
    T_tr = np.array([sample_temperature(tm, s["coords"][i]).T_max for i in te])
    rec, sur, trained = build_recommender(T_tr, y_tr, mesh.nodes, c.threshold, c.k, c.n_pairs, tuple(c.C_grid),
                                          tuple(c.l1_ratio_grid), c.folds, cfg.seeds.cv_seed)
    T_te = np.array([sample_temperature(tm, s["coords"][i]).T_max for i in dic["train"]])
    pred = rec.classifier.predict(T_te[:, rec.nodes])
    rows = classification_report_table(dic["labels"], pred)
    acc = float(np.mean(pred == dic["labels"]))
    clf = rec.classifier
    save_arrays(store.path("train-classifier", "model.bin"),
                {"nodes": rec.nodes, "coef": clf.coef_, "intercept": clf.intercept_, "classes": clf.classes_,
                 "hyper": np.array([trained.C, trained.l1_ratio]), "relevance": rec.relevance,
                 "preselected": rec.preselected, "pair_distances": sur.distances, "pair_mi": sur.pair_mi,
                 "test_pred": pred, "test_true": dic["labels"]},
                {"accuracy": acc, "cv_scores": {f"C={k[0]:g},l1={k[1]:g}": v for k, v in trained.cv_scores.items()}})
    w = ["node,x,y,z," + ",".join(f"w_class{k}" for k in clf.classes_)]
    W = clf.coef_.T if clf.coef_.shape[0] == clf.classes_.size else np.column_stack([-clf.coef_[0], clf.coef_[0]])
    for j, node in enumerate(rec.nodes):
        w.append(f"{node}," + ",".join(f"{v:.8g}" for v in mesh.nodes[node]) + "," +
                 ",".join(f"{v:.10g}" for v in np.atleast_1d(W[j])))
    w.append("intercept,,,," + ",".join(f"{v:.10g}" for v in np.atleast_1d(clf.intercept_)))
    atomic_write_text(store.path("train-classifier", "weights.csv"), "\n".join(w) + "\n")
    n_used = int(np.sum(np.any(clf.coef_ != 0, axis=0)))
    txt = [f"trained on {te.size} Sobol samples, tested on {dic['train'].size} MaxProj samples",
           f"preselected nodes {rec.preselected.size}, selected {rec.nodes.size}, used by the classifier {n_used}",
           f"C {trained.C:g}, l1_ratio {trained.l1_ratio:g}", f"test accuracy {acc:.4f}", "", format_report(rows)]
    atomic_write_text(store.path("train-classifier", "report.txt"), "\n".join(txt) + "\n")
    logger.info("train-classifier: held-out accuracy %.4f", acc)
    return ["model.bin", "model.bin.txt", "weights.csv", "report.txt"]


_ROMS = None


def _rom_job(args):
    i, k, coords = args
    try:
        rt = ReducedSolver(_HFM, _ROMS[k]).solve(sample_temperature(_TM, coords))
    except (ConvergenceError, MaterialIntegrationError) as exc:
        return i, None, str(exc)
    return i, (rt.p_cum_rid, rt.sigma_rid), None


def gappy_targets(name, basis, p_final, sigma_peak):
    """POD coefficients of the HFM fields at the time the QoI is read."""
    F = p_final if name == "p_cum" else sigma_peak[..., DUAL_NAMES.index(name) - 1]
    return basis.coefficients(F)


def gappy_inputs(name, p_cum_rid, sigma_rid, peak):
    return p_cum_rid[-1] if name == "p_cum" else sigma_rid[peak, :, DUAL_NAMES.index(name) - 1]


def _stage_gappy(cfg, store, workers):
    global _HFM, _TM, _ROMS
    mesh, dic, s = load_mesh(store), load_dictionary(store), load_summary(store)
    roms = load_roms(store)
    _HFM, _TM, _ROMS = make_hfm(cfg, mesh), load_thermal(store), roms
    peak = cfg.schedule.peak_step
    test, labels = dic["test"], dic["test_labels"]
    jobs = [(int(i), int(k), s["coords"][i]) for i, k in zip(test, labels) if k >= 0]
    res = {i: r for i, r, e in _pool_map(_rom_job, jobs, workers) if r is not None}
    _HFM = _TM = _ROMS = None
    g = cfg.gappy
    outputs, lines = [], []
    for k, rom in roms.items():
        ids = np.array([i for i, kk, _ in jobs if kk == k and i in res], dtype=np.int64)
        arrays = {"samples": ids}
        for name in DUAL_NAMES:
            basis = rom.duals[name]
            arrays.update(basis.to_arrays(f"{name}.basis."))
            X = np.array([gappy_inputs(name, *res[i], peak) for i in ids]).reshape(ids.size, -1)
            Y = gappy_targets(name, basis, s["p_final"][ids], s["sigma_peak"][ids]).reshape(ids.size, -1)
            if ids.size < 2 * g.folds:      # R2 needs two samples per held-out fold
                logger.warning("cluster %d: %d samples for %s, Gappy-POD is used instead", k, ids.size, name)
                lines.append(f"cluster {k} {name}: Gappy-POD (only {ids.size} samples)")
                continue
            sur = train_gappy_surrogate(X, Y, g.folds, cfg.seeds.cv_seed, g.n_lambdas, g.lambda_ratio, g.tol)
            arrays.update(sur.to_arrays(f"{name}."))
            # Gappy-POD baseline on the same samples, for comparison
            c_pod = gappy_pod(X, basis.modes[:, rom.rid])
            ref = np.sqrt(np.sum(Y ** 2, axis=1))
            e_pod = np.mean(np.sqrt(np.sum((c_pod - Y) ** 2, axis=1)) / np.where(ref > 0, ref, 1))
            lines.append(f"cluster {k} {name}: {ids.size} samples, {basis.n_modes} modes, lambda {sur.lam:.3g}, "
                         f"CV mean R2 {sur.cv_score:.4f} (unweighted {sur.cv_score_uniform:.4f}), "
                         f"active inputs {100 * sur.fraction_active:.1f}%, "
                         f"Gappy-POD coefficient error {e_pod:.4f}")
        save_arrays(store.path("train-gappy", f"cluster_{k}.bin"), arrays)
        outputs += [f"cluster_{k}.bin", f"cluster_{k}.bin.txt"]
    atomic_write_text(store.path("train-gappy", "summary.txt"), "\n".join(lines) + "\n")
    return outputs + ["summary.txt"]


def _stage_uq(cfg, store, workers):
    net = load_romnet(cfg, store)
    zone = load_zone(store)
    rep = run_monte_carlo(net, zone, cfg.uq.draws, cfg.seeds.mc_seed, workers)
    write_uq_report(rep, store.path("uq"), cfg.uq.kde_points, cfg.uq.histogram_bins)
    save_arrays(store.path("uq", "samples.bin"),
                {"p_bar": rep.p_bar, "s_eq_bar": rep.s_eq_bar, "clusters": rep.clusters, "draw_ids": rep.draw_ids},
                {"failures": [list(map(str, f)) for f in rep.failures]})
    outs = ["summary.txt", "samples.csv", "samples.bin", "samples.bin.txt"]
    outs += [f for f in ("kde.csv", "histogram.csv") if os.path.exists(store.path("uq", f))]
    return outs


def validation_coordinates(n, seed, dim=5):
    return mc_coordinates(n, seed, dim)


def run_validation(net, zone, coords):
    """HFM and ROM-net on each loading; per-draw indicators and timings.

    Draws run one after the other in this process so that the two wall
    times are measured under the same conditions.
    """
    hfm, mesh = net.hfm, net.hfm.mesh
    pos, vol = ip_positions(mesh), mesh.volumes
    peak = hfm.schedule.peak_step
    rows, skipped = [], []
    with threadpool_limits(1):
        for i, c in enumerate(coords):
            sample = sample_temperature(net.thermal_model, c)
            try:
                t0 = time.perf_counter()
                tr = hfm.solve_cycle(sample)
                t_hf = time.perf_counter() - t0
            except (ConvergenceError, MaterialIntegrationError) as exc:
                skipped.append((i, f"HFM: {exc}"))
                continue
            try:
                t0 = time.perf_counter()
                pr = net.predict(sample)
                t_rom = time.perf_counter() - t0
            except (ConvergenceError, MaterialIntegrationError) as exc:
                skipped.append((i, f"ROM-net: {exc}"))
                continue
            ind = {"p_cum": error_indicators(pr.p_cum, tr.p_cum[-1], zone, vol, pos),
                   "sigma_eq": error_indicators(von_mises_voigt(pr.sigma), von_mises_voigt(tr.sigma[peak]),
                                                zone, vol, pos)}
            rows.append({"draw": i, "cluster": pr.cluster, "t_hfm": t_hf, "t_rom": t_rom, "indicators": ind})
    return rows, skipped


def summarize_validation(rows):
    out = {}
    for var in ("p_cum", "sigma_eq"):
        out[var] = {k: float(np.mean([r["indicators"][var][k] for r in rows])) for k in INDICATOR_LABELS}
    t_h = np.mean([r["t_hfm"] for r in rows])
    t_r = np.mean([r["t_rom"] for r in rows])
    out["t_hfm"], out["t_rom"], out["speedup"] = float(t_h), float(t_r), float(t_h / t_r)
    return out


def format_validation(summary, rows, skipped):
    lines = [f"{'indicator':<50}{'p_cum':>12}{'sigma_eq':>12}"]
    for k, label in INDICATOR_LABELS.items():
        fmt = (lambda v: f"{v:.4g}") if k == "dist_max" else (lambda v: f"{100 * v:.3f}%")
        lines.append(f"{label:<50}{fmt(summary['p_cum'][k]):>12}{fmt(summary['sigma_eq'][k]):>12}")
    lines += ["", f"draws evaluated {len(rows)}, skipped {len(skipped)}",
              f"mean HFM time {summary['t_hfm']:.3f} s, mean ROM-net time {summary['t_rom']:.3f} s, "
              f"speedup {summary['speedup']:.2f}", "", "draw cluster t_hfm t_rom speedup"]
    for r in rows:
        lines.append(f"{r['draw']} {r['cluster']} {r['t_hfm']:.3f} {r['t_rom']:.3f} {r['t_hfm'] / r['t_rom']:.2f}")
    for i, e in skipped:
        lines.append(f"skipped draw {i}: {e}")
    return "\n".join(lines) + "\n"


def _stage_validate(cfg, store, workers):
    net = load_romnet(cfg, store)
    zone = load_zone(store)
    coords = validation_coordinates(cfg.validate.n_new, cfg.seeds.validate_seed)
    rows, skipped = run_validation(net, zone, coords)
    if not rows:
        raise PipelineError("validation: every draw failed")
    summ = summarize_validation(rows)
    atomic_write_text(store.path("validate", "table.txt"), format_validation(summ, rows, skipped))
    arrays = {"draws": np.array([r["draw"] for r in rows], dtype=np.int64),
              "clusters": np.array([r["cluster"] for r in rows], dtype=np.int64),
              "t_hfm": np.array([r["t_hfm"] for r in rows]), "t_rom": np.array([r["t_rom"] for r in rows])}
    for var in ("p_cum", "sigma_eq"):
        for k in INDICATOR_LABELS:
            arrays[f"{var}.{k}"] = np.array([r["indicators"][var][k] for r in rows])
    save_arrays(store.path("validate", "indicators.bin"), arrays, {"skipped": [list(map(str, s)) for s in skipped]})
    logger.info("validate: L2 p_cum %.4f, sigma_eq %.4f, speedup %.2f", summ["p_cum"]["l2_omega"],
                summ["sigma_eq"]["l2_omega"], summ["speedup"])
    return ["table.txt", "indicators.bin", "indicators.bin.txt"]


def _stage_report(cfg, store, workers):
    parts = [("Clustering", store.path("cluster", "summary.txt")),
             ("Local ROMs", store.path("train-rom", "summary.txt")),
             ("Classifier", store.path("train-classifier", "report.txt")),
             ("Gappy surrogates", store.path("train-gappy", "summary.txt")),
             ("Monte Carlo", store.path("uq", "summary.txt")),
             ("Validation", store.path("validate", "table.txt"))]
    out = [f"config hash {cfg.hash()}", ""]
    for title, p in parts:
        out += [title, "-" * len(title)]
        with open(p) as f:
            out.append(f.read())
    atomic_write_text(store.path("report", "report.txt"), "\n".join(out))
    return ["report.txt"]


_RUNNERS = {
    "mesh": _stage_mesh, "thermal-build": _stage_thermal, "doe": _stage_doe, "hfm-run": _stage_hfm,
    "cluster": _stage_cluster, "train-rom": _stage_rom, "train-classifier": _stage_classifier,
    "train-gappy": _stage_gappy, "uq": _stage_uq, "validate": _stage_validate, "report": _stage_report,
}
