"""2-D accuracy landscapes around a trained parameter vector."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..anchoring import anchor
from ..errors import ValidationError
from ..metrics import top1_accuracy
from ..models import Model, predict_logits, with_weights

NORMALIZATIONS = ("filter_norm", "global_norm")


@dataclass
class LandscapeGrid:
    n: int
    radius: float
    normalization: str
    direction_seeds: tuple
    accuracy: np.ndarray = field(repr=False)

    @property
    def offsets(self) -> np.ndarray:
        return axis_offsets(self.n, self.radius)

    @property
    def center(self) -> float:
        return float(self.accuracy[self.n // 2, self.n // 2])

    def plateau_fraction(self, tolerance: float = 0.05) -> float:
        """Fraction of cells within ``tolerance`` of the grid maximum."""
        return float(np.mean(self.accuracy >= self.accuracy.max() - tolerance))

    def to_csv(self, path) -> None:
        a = self.offsets
        lines = ["i,j,a,b,accuracy"]
        for i in range(self.n):
            for j in range(self.n):
                lines.append(f"{i},{j},{float(a[i])!r},{float(a[j])!r},{float(self.accuracy[i, j])!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def to_pgm(self, path) -> None:
        write_pgm(path, self.accuracy)


def axis_offsets(n: int, radius: float) -> np.ndarray:
    # built from integer steps so the middle entry is exactly zero
    half = n // 2
    if half == 0:
        return np.zeros(1)
    return radius * (np.arange(n) - half) / half


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM; values in [0, 1] map linearly onto 0..255."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    pix = np.round(v * 255.0).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValidationError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def random_direction(state: dict, seed: int, normalization: str) -> dict:
    """Gaussian direction scaled to the parameters.

    ``filter_norm`` rescales every output filter (conv) or output unit (dense)
    to the norm of the matching weights; bias directions are zero.
    ``global_norm`` rescales the whole direction to the norm of all parameters.
    """
    if normalization not in NORMALIZATIONS:
        raise ValidationError(f"normalization must be one of {NORMALIZATIONS}")
    rng = np.random.default_rng(seed)
    d = {name: rng.standard_normal(p.shape) for name, p in state.items()}
    if normalization == "global_norm":
        pn = np.sqrt(sum(float(np.sum(p * p)) for p in state.values()))
        dn = np.sqrt(sum(float(np.sum(v * v)) for v in d.values()))
        return {k: v * (pn / dn) for k, v in d.items()}
    out = {}
    for name, p in state.items():
        v = d[name]
        if p.ndim == 1:
            out[name] = np.zeros_like(v)
            continue
        # conv kernels are (F, C, k, k); dense weights are (in, out)
        axes = tuple(range(1, p.ndim)) if p.ndim == 4 else (0,)
        pn = np.sqrt(np.sum(p * p, axis=axes, keepdims=True))
        vn = np.sqrt(np.sum(v * v, axis=axes, keepdims=True))
        out[name] = v * pn / np.maximum(vn, 1e-300)
    return out


def landscape(model: Model, accuracy_of, n: int = 21, radius: float = 1.0,
              normalization: str = "filter_norm", seeds=(0, 1)) -> LandscapeGrid:
    """Evaluate ``accuracy_of(model)`` on an n x n grid of weight perturbations."""
    if n < 1 or n % 2 == 0:
        raise ValidationError(f"grid size must be odd, got {n}")
    if radius < 0:
        raise ValidationError("radius must be nonnegative")
    base = model.state_dict()
    d1 = random_direction(base, seeds[0], normalization)
    d2 = random_direction(base, seeds[1], normalization)
    a = axis_offsets(n, radius)
    acc = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            state = {k: base[k] + a[i] * d1[k] + a[j] * d2[k] for k in base}
            acc[i, j] = accuracy_of(with_weights(model, state))
    return LandscapeGrid(n, float(radius), normalization, tuple(seeds), acc)


def run_landscape(art, n: int = 21, radius: float = 1.0, normalization: str = "filter_norm",
                  seeds=(0, 1), n_eval: int | None = 500, out_dir=None) -> LandscapeGrid:
    """Landscape of a loaded run on its clean test split (first ``n_eval`` samples)."""
    test = art.test if n_eval is None else art.test.subset(np.arange(min(n_eval, len(art.test))))
    x = test.images
    if art.ref_set is not None:
        x = anchor(x, art.single_reference()).joint

    def accuracy_of(m):
        return top1_accuracy(predict_logits(m, x), test.labels)

    grid = landscape(art.model, accuracy_of, n, radius, normalization, seeds)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        grid.to_csv(out / "landscape.csv")
        grid.to_pgm(out / "landscape.pgm")
    return grid
