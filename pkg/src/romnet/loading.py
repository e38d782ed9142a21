"""Flight-cycle schedule and the mechanical loads it drives."""

from dataclasses import dataclass, asdict

import numpy as np


@dataclass
class CycleSchedule:
    """One flight cycle discretised in ``n_steps`` equal time increments.

    ``omega`` (rotation speed scaled to a maximum of 1) rises linearly over
    the take-off steps, holds 1 during cruise and falls back to 0 at landing.
    """

    t_cycle: float = 1100.0
    takeoff_steps: int = 3
    cruise_steps: int = 5
    landing_steps: int = 3
    omega_max: float = 1500.0      # rad/s at omega = 1
    density: float = 8.9e-9        # t/mm^3
    p_max: float = 2.0             # MPa, uniform on the pressure facets
    t_zero: float = 293.0

    @property
    def n_steps(self):
        return self.takeoff_steps + self.cruise_steps + self.landing_steps

    @property
    def times(self):
        return np.linspace(0.0, self.t_cycle, self.n_steps + 1)

    @property
    def omega_nodes(self):
        up = np.arange(self.takeoff_steps + 1) / self.takeoff_steps
        hold = np.ones(self.cruise_steps)
        down = 1.0 - np.arange(1, self.landing_steps + 1) / self.landing_steps
        return np.concatenate([up, hold, down])

    def omega(self, t):
        return np.interp(t, self.times, self.omega_nodes)

    @property
    def peak_step(self):
        """First time index at which omega reaches its maximum."""
        return int(np.argmax(self.omega_nodes >= 1.0))

    def to_dict(self):
        return asdict(self)


def centrifugal_force(xi, t, schedule, axis_point, axis_direction, density=None):
    """Volumic centrifugal force ``rho Omega_max^2 omega(t)^2 r_perp``.

    ``r_perp`` is the vector from the rotation axis to ``xi``, perpendicular
    to the axis.  Force scales with the squared rotation speed.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    rho = schedule.density if density is None else density
    a = np.asarray(axis_direction, dtype=float)
    a = a / np.linalg.norm(a)
    d = xi - np.asarray(axis_point, dtype=float)
    r_perp = d - np.outer(d @ a, a)
    w = schedule.omega(t)
    return rho * schedule.omega_max ** 2 * w ** 2 * r_perp


def pressure(t, schedule):
    """Gauge pressure on the loaded facets, linear in omega (zero at rest)."""
    return schedule.omega(t) * schedule.p_max
