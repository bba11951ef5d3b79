import math

import numpy as np
import pytest

from molrl.chem import Canvas, element


def tetrahedral_canvas(bond: float = 1.09, center: str = "C", outer: str = "H") -> Canvas:
    vecs = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]) / math.sqrt(3)
    positions = np.vstack([[0.0, 0.0, 0.0], vecs * bond])
    return Canvas([element(center)] + [element(outer)] * 4, positions)


def water_canvas() -> Canvas:
    # O-H 0.96 A, H-O-H 104.5 deg
    ang = math.radians(104.5)
    return Canvas(
        [element("O"), element("H"), element("H")],
        [[0, 0, 0], [0.96, 0, 0], [0.96 * math.cos(ang), 0.96 * math.sin(ang), 0]],
    )


def ethene_canvas() -> Canvas:
    # planar C2H4: C=C 1.33, C-H 1.09, H-C=C angle 120 deg
    cc = 1.33
    ch = 1.09
    cx, sx = ch * math.cos(math.radians(120)), ch * math.sin(math.radians(120))
    return Canvas(
        [element("C"), element("C")] + [element("H")] * 4,
        [
            [0, 0, 0],
            [cc, 0, 0],
            [cx, sx, 0],
            [cx, -sx, 0],
            [cc - cx, sx, 0],
            [cc - cx, -sx, 0],
        ],
    )


@pytest.fixture
def methane():
    return tetrahedral_canvas()


@pytest.fixture
def water():
    return water_canvas()


@pytest.fixture
def ethene():
    return ethene_canvas()


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation matrix via QR."""
    m = rng.normal(size=(3, 3))
    q, r = np.linalg.qr(m)
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def max_grad_error(fd: np.ndarray, analytic: np.ndarray, atol: float = 1e-9) -> float:
    """Worst relative error, with an absolute floor masking FD noise."""
    fd = np.asarray(fd, dtype=float).ravel()
    an = np.asarray(analytic, dtype=float).ravel()
    scale = np.maximum(np.maximum(np.abs(fd), np.abs(an)), atol / 1e-4)
    return float((np.abs(fd - an) / scale).max())


def spearman_rho(x, y) -> float:
    """Spearman rank correlation with average ranks on ties."""

    def ranks(v):
        v = np.asarray(v, dtype=float)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(len(v), dtype=float)
        # average ties
        out = r.copy()
        sorted_v = v[order]
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and sorted_v[j + 1] == sorted_v[i]:
                j += 1
            if j > i:
                out[order[i : j + 1]] = (i + j) / 2.0
            i = j + 1
        return out

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    return float((rx * ry).sum() / denom) if denom > 0 else 0.0
