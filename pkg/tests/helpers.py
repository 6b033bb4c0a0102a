"""Shared measurement routines for the growth tests and the acceptance suite."""

import math

from tfk.grid import GridSpec, Tissue, TissueMap
from tfk.growth import (GrowthParams, fisher_kpp_speed, front_position, max_stable_dt,
                        simulate_at)


def logistic(c0, rho, t):
    e = math.exp(rho * t)
    return c0 * e / (1.0 + c0 * (e - 1.0))


def measure_front_speed(rho, d, n=256):
    """C = 0.5 front speed on an n x 1 x 1 white-matter line seeded at x = 0.

    The run lasts until the predicted front has crossed 60% of the line; the
    speed is the displacement between the half-way time and the end divided
    by the elapsed time, so the initial transient is excluded.
    """
    spec = GridSpec(n, 1, 1)
    tissue = TissueMap.uniform(spec, Tissue.WHITE_MATTER)
    params = GrowthParams(seed_center=(0.0, 0.0, 0.0), rho=rho, d_white=d, seed_sigma=2.0)
    t_end = 0.6 * n / fisher_kpp_speed(rho, d)
    dt = max_stable_dt(spec, d)
    (t1, c1), (t2, c2) = simulate_at(tissue, params, [t_end / 2, t_end], dt)
    return (front_position(c2) - front_position(c1)) / (t2 - t1)
