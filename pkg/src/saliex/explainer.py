"""Prediction-difference explanations for saliency predictors.

Each k x k patch is "removed" by replacing it with nearby image content
(windows shifted by at most ``window_margin`` pixels), the predictor is
re-run on those imputations, and the log-odds drop of the original prediction
relative to the averaged imputed prediction is the patch's evidence.
Positive evidence means the patch supports saliency; negative means it
suppresses it.

A predictor is any callable ``image -> saliency`` (values in (0, 1), shape
``[H, W]`` or ``[1, H, W]``) that tolerates concurrent calls.  Images are
numpy arrays whose last two axes are ``H, W``.
"""

from __future__ import annotations

import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ExplanationError

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
EPS = 1e-6

Predictor = Callable[[np.ndarray], np.ndarray]


class SplitMix64:
    """SplitMix64 stream; identical output on every platform."""

    def __init__(self, state: int):
        self.state = state & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Integer in ``[0, n)`` by multiply-shift of the next 64-bit output."""
        return (self.next() * n) >> 64


def patch_rng(seed: int, index: int) -> SplitMix64:
    """Independent stream for patch ``index`` (0-based)."""
    mixed = SplitMix64((seed ^ ((index + 1) * GOLDEN_GAMMA)) & MASK64).next()
    return SplitMix64(mixed)


@dataclass(frozen=True)
class ExplainConfig:
    patch_size: int = 4
    window_margin: int = 2
    patch_stride: int = 2
    num_samples: int = 3
    seed: int = 0
    parallel_workers: int = 1
    # how a patch's evidence map is reduced to one number: "global" mean over
    # all pixels, or "salient" mean over pixels the original prediction marks > 0.5
    reduce: str = "global"

    def __post_init__(self):
        for name in ("patch_size", "window_margin", "patch_stride", "num_samples", "parallel_workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"explain config: {name} must be >= 1")
        if self.reduce not in ("global", "salient"):
            raise ConfigError("explain config: reduce must be 'global' or 'salient'")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("explain config: seed must fit in 64 bits")

    @property
    def window(self) -> int:
        return self.patch_size + 2 * self.window_margin

    @classmethod
    def from_dict(cls, d: dict) -> "ExplainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown explain config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    # 16x16 patches, 24x24 sampling window, 5 samples, stride 2
    "paper": ExplainConfig(patch_size=16, window_margin=4, patch_stride=2, num_samples=5),
    "desk": ExplainConfig(patch_size=4, window_margin=2, patch_stride=2, num_samples=3),
}
PAPER_CROP = 224


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    size: int
    rects: tuple[tuple[int, int, int, int], ...]  # (top, left, k, k), row-major

    def __len__(self) -> int:
        return len(self.rects)

    def coverage(self) -> np.ndarray:
        cov = np.zeros((self.height, self.width), dtype=np.int64)
        for top, left, kh, kw in self.rects:
            cov[top : top + kh, left : left + kw] += 1
        return cov


def _starts(n: int, k: int, s: int) -> list[int]:
    out = list(range(0, n - k + 1, s))
    if out[-1] != n - k:
        out.append(n - k)
    return out


def enumerate_patches(height: int, width: int, config: ExplainConfig) -> PatchGrid:
    k = config.patch_size
    if k > min(height, width):
        raise ConfigError(f"patch size {k} exceeds image size {height}x{width}")
    tops = _starts(height, k, config.patch_stride)
    lefts = _starts(width, k, config.patch_stride)
    return PatchGrid(height, width, k, tuple((t, l, k, k) for t in tops for l in lefts))


def candidate_offsets(rect, height: int, width: int, margin: int) -> list[tuple[int, int]]:
    """In-bounds source shifts ``(dy, dx)`` within ``[-margin, margin]^2``, minus ``(0, 0)``."""
    top, left, kh, kw = rect
    out = []
    for dy in range(-margin, margin + 1):
        if not 0 <= top + dy <= height - kh:
            continue
        for dx in range(-margin, margin + 1):
            if (dy, dx) != (0, 0) and 0 <= left + dx <= width - kw:
                out.append((dy, dx))
    return out


def sample_conditional(image: np.ndarray, rect, config: ExplainConfig, rng: SplitMix64) -> list[np.ndarray]:
    """``num_samples`` copies of ``image`` with the patch overwritten by a shifted neighbour window."""
    image = np.asarray(image)
    height, width = image.shape[-2:]
    top, left, kh, kw = rect
    if top < 0 or left < 0 or top + kh > height or left + kw > width:
        raise ContractError(f"patch {rect} lies outside the {height}x{width} image")
    cands = candidate_offsets(rect, height, width, config.window_margin)
    if not cands:
        raise ExplanationError(f"no in-bounds neighbour window for patch {rect}")
    out = []
    for _ in range(config.num_samples):
        dy, dx = cands[rng.below(len(cands))]
        imputed = image.copy()
        imputed[..., top : top + kh, left : left + kw] = image[
            ..., top + dy : top + dy + kh, left + dx : left + dx + kw
        ]
        out.append(imputed)
    return out


def _predict(predictor: Predictor, image: np.ndarray) -> np.ndarray:
    pred = np.asarray(predictor(image), dtype=np.float64)
    if pred.ndim == 3 and pred.shape[0] == 1:
        pred = pred[0]
    if pred.shape != tuple(image.shape[-2:]):
        raise ContractError(f"predictor returned shape {pred.shape} for image {image.shape}")
    if not (np.all(pred > 0.0) and np.all(pred < 1.0)):
        raise ContractError("predictor output must lie strictly inside (0, 1)")
    return pred


def gen_prediction(predictor: Predictor, imputed_images: Sequence[np.ndarray]) -> np.ndarray:
    """Uniform Monte-Carlo average of the predictor over the imputations."""
    if not len(imputed_images):
        raise ContractError("gen_prediction needs at least one imputed image")
    total = None
    for img in imputed_images:
        p = _predict(predictor, img)
        total = p if total is None else total + p
    return total / len(imputed_images)


def logit(p, eps: float = EPS) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(p / (1.0 - p))


def fse_patch(enc_map, gen_map, eps: float = EPS) -> np.ndarray:
    enc_map = np.asarray(enc_map, dtype=np.float64)
    gen_map = np.asarray(gen_map, dtype=np.float64)
    if enc_map.shape != gen_map.shape:
        raise ContractError(f"fse_patch: shape mismatch {enc_map.shape} vs {gen_map.shape}")
    return logit(enc_map, eps) - logit(gen_map, eps)


@dataclass
class ExplanationMap:
    values: np.ndarray  # [H, W] float64, signed
    coverage: np.ndarray  # [H, W] int

    def to_csv(self) -> str:
        buf = io.StringIO()
        for row in self.values:
            buf.write(",".join(repr(float(v)) for v in row))
            buf.write("\n")
        return buf.getvalue()


def aggregate(per_patch_evidence, grid: PatchGrid, height: int, width: int) -> ExplanationMap:
    """Paint each patch's mean evidence over its pixels and average by coverage."""
    if len(per_patch_evidence) != len(grid):
        raise ContractError(f"{len(per_patch_evidence)} evidence maps for {len(grid)} patches")
    values = np.zeros((height, width))
    coverage = np.zeros((height, width), dtype=np.int64)
    for ev, (top, left, kh, kw) in zip(per_patch_evidence, grid.rects):
        values[top : top + kh, left : left + kw] += float(np.mean(ev))
        coverage[top : top + kh, left : left + kw] += 1
    if np.any(coverage == 0):
        raise ContractError("patch grid leaves pixels uncovered")
    return ExplanationMap(values / coverage, coverage)


def _reduce(fse: np.ndarray, enc_map: np.ndarray, how: str) -> float:
    if how == "salient":
        sel = enc_map > 0.5
        if np.any(sel):
            return float(np.mean(fse[sel]))
    return float(np.mean(fse))


def explain(predictor: Predictor, image, config: ExplainConfig = ExplainConfig()) -> ExplanationMap:
    """Explanation map of ``predictor`` on ``image``; exactly 1 + M*S predictor calls."""
    image = np.asarray(image)
    height, width = image.shape[-2:]
    grid = enumerate_patches(height, width, config)
    enc_map = _predict(predictor, image)

    def one_patch(m: int) -> float:
        imputed = sample_conditional(image, grid.rects[m], config, patch_rng(config.seed, m))
        gen = gen_prediction(predictor, imputed)
        return _reduce(fse_patch(enc_map, gen), enc_map, config.reduce)

    if config.parallel_workers == 1:
        scalars = [one_patch(m) for m in range(len(grid))]
    else:
        with ThreadPoolExecutor(max_workers=config.parallel_workers) as pool:
            scalars = list(pool.map(one_patch, range(len(grid))))
    return aggregate(scalars, grid, height, width)


@dataclass(frozen=True)
class FseStats:
    mean: float
    std_pos: float
    std_neg: float
    n_pos: int
    n_neg: int

    def to_csv(self) -> str:
        return (
            "mean,std_pos,std_neg,n_pos,n_neg\n"
            f"{self.mean!r},{self.std_pos!r},{self.std_neg!r},{self.n_pos},{self.n_neg}\n"
        )


def fse_stats(emap) -> FseStats:
    """Mean over all pixels; population STD of the positive and negative entries separately."""
    v = np.asarray(emap.values if isinstance(emap, ExplanationMap) else emap, dtype=np.float64)
    pos, neg = v[v > 0], v[v < 0]
    return FseStats(
        mean=float(np.mean(v)) if v.size else 0.0,
        std_pos=float(np.std(pos)) if pos.size else 0.0,
        std_neg=float(np.std(neg)) if neg.size else 0.0,
        n_pos=int(pos.size),
        n_neg=int(neg.size),
    )


# ---------------------------------------------------------------------------
# reference predictors


def constant_predictor(value: float = 0.5) -> Predictor:
    def predict(image):
        return np.full(np.shape(image)[-2:], value)

    return predict


def contrast_predictor(image) -> np.ndarray:
    """Analytic centre-surround model: ``sigmoid(4 * (local 7x7 mean - global mean))``."""
    from scipy.ndimage import uniform_filter

    img = np.asarray(image, dtype=np.float64)
    grey = img.mean(axis=0) if img.ndim == 3 else img
    local = uniform_filter(grey, size=7, mode="nearest")
    return 1.0 / (1.0 + np.exp(-4.0 * (local - grey.mean())))
