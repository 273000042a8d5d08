"""Small synthetic labeled hearts for demos and tests.

Chambers are solid ellipsoids laid out along the ventricular long axis
implied by the short-axis view origins, so the built-in sectors cut through
them. Labels used here:

====  ==================
0     background tissue
1     left ventricle
2     right ventricle
3     left atrium
4     right atrium
5     myocardium shell
====  ==================
"""

from __future__ import annotations

import numpy as np

from .geometry import LabeledCloud
from .seeding import generator
from .views import VIEW_ORIGINS, long_axis_direction

LV, RV, LA, RA, MYO = 1, 2, 3, 4, 5
ATRIA = (LA, RA)


def _frame():
    L = long_axis_direction()
    e1 = np.cross(L, [0.0, 0.0, 1.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(L, e1)
    return L, e1, e2


def _chambers(lv_scale: float):
    mid = np.asarray(VIEW_ORIGINS["MidCavity"])
    # (label, centre offset along (L, e1, e2) in mm, semi-axes along (L, e1, e2))
    return [
        (LV, mid + 0.0, (40.0, 22.0 * lv_scale, 22.0 * lv_scale)),
        (RV, (0.0, -30.0, 0.0), (34.0, 14.0, 20.0)),
        (LA, (-55.0, 8.0, 0.0), (16.0, 16.0, 16.0)),
        (RA, (-50.0, -28.0, 0.0), (15.0, 15.0, 15.0)),
    ]


def synthetic_heart(n: int = 4000, seed: int = 0, lv_scale: float = 1.0, myo_thickness: float = 6.0) -> LabeledCloud:
    """Uniform points inside a toy four-chamber heart, labeled by chamber.

    ``lv_scale`` shrinks the LV cross-section, e.g. to mimic end-systole.
    """
    rng = generator(seed)
    L, e1, e2 = _frame()
    R = np.stack([L, e1, e2], axis=1)  # local -> world
    mid = np.asarray(VIEW_ORIGINS["MidCavity"])
    shapes = []
    for label, centre, axes in _chambers(lv_scale):
        c = np.asarray(centre, dtype=np.float64)
        world_c = c if label == LV else mid + R @ c
        shapes.append((label, world_c, np.asarray(axes)))
    lv_c, lv_axes = shapes[0][1], shapes[0][2]
    shapes.append((MYO, lv_c, lv_axes + myo_thickness))

    lo = np.min([c - a.max() for _, c, a in shapes], axis=0)
    hi = np.max([c + a.max() for _, c, a in shapes], axis=0)
    pts, labels = [], []
    count = 0
    while count < n:
        x = rng.uniform(lo, hi, size=(4 * n, 3))
        lab = np.full(len(x), -1)
        # later shapes only claim points not already inside an earlier one
        for label, c, a in shapes:
            local = (x - c) @ R / a
            inside = (np.sum(local ** 2, axis=1) <= 1.0) & (lab < 0)
            lab[inside] = label
        keep = lab >= 0
        pts.append(x[keep])
        labels.append(lab[keep])
        count += int(keep.sum())
    return LabeledCloud(np.vstack(pts)[:n], np.concatenate(labels)[:n])


# Published 14-patient heart-failure cohort: (GLPS %, EF fraction).
REFERENCE_COHORT = (
    (-12.1, 0.2641), (-12.4, 0.2859), (-14.9, 0.2970), (-15.3, 0.3028),
    (-14.0, 0.3035), (-15.8, 0.3127), (-12.6, 0.3151), (-14.7, 0.3166),
    (-16.7, 0.3206), (-14.2, 0.3297), (-15.4, 0.3352), (-16.8, 0.3723),
    (-18.2, 0.3742), (-20.1, 0.3861),
)
# Direct-formula Pearson correlation of the cohort, kept as a regression value
REFERENCE_COHORT_PCC = -0.85571665


def write_reference_cohort(path) -> None:
    """Write the cohort as a ``patient_id,glps,ef`` table."""
    lines = ["patient_id,glps,ef"]
    lines += [f"P{i + 1:02d},{g},{e}" for i, (g, e) in enumerate(REFERENCE_COHORT)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
