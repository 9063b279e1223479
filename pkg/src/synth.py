"""
合成データ生成モジュール
既知の時間・空間相関を持つカウントグリッドを生成 (診断と学習の検証用)
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .ingest import GridSpec, MONTHLY, SpatioTemporalGrid


logger = logging.getLogger(__name__)

TYPE_NAMES = ("type_a", "type_b")


@dataclass(frozen=True)
class SynthParams:
    """合成グリッドのパラメータ"""
    rows: int
    cols: int
    t_steps: int
    temporal_coeffs: Tuple[float, ...] = ()
    spatial_kernel_radius: float = 0.0
    base_rate: float = 10.0
    seed: int = 0
    kernel_anisotropy: float = 1.0     # 列方向の平滑化幅 / 行方向の平滑化幅
    cell_size_km: float = 1.0
    burn_in: int = 50

    def __post_init__(self):
        object.__setattr__(self, "temporal_coeffs", tuple(float(a) for a in self.temporal_coeffs))
        if self.rows < 1 or self.cols < 1 or self.t_steps < 1:
            raise ValueError(f"グリッド寸法が不正です: {self.t_steps}x{self.rows}x{self.cols}")
        if self.spatial_kernel_radius < 0 or self.kernel_anisotropy <= 0:
            raise ValueError("平滑化半径は 0 以上、異方性は正である必要があります")
        if not self.base_rate > 0:
            raise ValueError(f"基準レートは正である必要があります: {self.base_rate}")
        check_stationary(self.temporal_coeffs)


def check_stationary(coeffs: Sequence[float]):
    """AR(p<=2) 係数の定常性を確認"""
    coeffs = tuple(coeffs)
    if len(coeffs) > 2:
        raise ValueError(f"AR 次数は 2 以下: {len(coeffs)}")
    if len(coeffs) == 1 and abs(coeffs[0]) >= 1.0:
        raise ValueError(f"非定常な AR(1) 係数です: {coeffs}")
    if len(coeffs) == 2:
        a1, a2 = coeffs
        if not (a1 + a2 < 1.0 and a2 - a1 < 1.0 and abs(a2) < 1.0):
            raise ValueError(f"非定常な AR(2) 係数です: {coeffs}")


def ar_variance(coeffs: Sequence[float]) -> float:
    """単位分散イノベーションに対する AR 過程の定常分散"""
    coeffs = tuple(coeffs)
    if not coeffs:
        return 1.0
    if len(coeffs) == 1:
        return 1.0 / (1.0 - coeffs[0] ** 2)
    a1, a2 = coeffs
    return (1.0 - a2) / ((1.0 + a2) * ((1.0 - a2) ** 2 - a1 ** 2))


def _smoothing_sigma(params: SynthParams) -> Tuple[float, float]:
    radius = params.spatial_kernel_radius
    return (radius, radius * params.kernel_anisotropy)


def _kernel_norm(shape: Tuple[int, int], sigma: Tuple[float, float]) -> float:
    """平滑化後のノイズが単位分散になる正規化係数"""
    delta = np.zeros(shape)
    delta[shape[0] // 2, shape[1] // 2] = 1.0
    kernel = gaussian_filter(delta, sigma, mode="wrap")
    return float(np.sqrt(np.sum(kernel ** 2)))


def _split_types(counts: np.ndarray, rng: np.random.Generator) -> dict:
    proportion = rng.uniform(0.3, 0.7)
    first = rng.binomial(counts, proportion)
    return {TYPE_NAMES[0]: first, TYPE_NAMES[1]: counts - first}


def _spec(rows: int, cols: int, t_steps: int, cell: float) -> GridSpec:
    return GridSpec(
        rows=rows,
        cols=cols,
        origin=(0.0, 0.0),
        cell_size=(cell, cell),
        t_steps=t_steps,
        t_resolution=MONTHLY,
        t_start="2000-01",
        crs="BNG",
    )


def generate(params: SynthParams) -> SpatioTemporalGrid:
    """
    AR(p) 潜在場から合成カウントグリッドを生成

    各セルの潜在値は時間方向に AR(p)、イノベーションは空間ガウス平滑化した
    ノイズ。カウント = clip(round(base_rate + sqrt(base_rate) * 標準化潜在値), 0)。
    2 種別にはシード付きの固定比率で二項分割する。

    Args:
        params: 合成パラメータ

    Returns:
        SpatioTemporalGrid
    """
    rng = np.random.default_rng(params.seed)
    shape = (params.rows, params.cols)
    sigma = _smoothing_sigma(params)
    smooth = params.spatial_kernel_radius > 0
    norm = _kernel_norm(shape, sigma) if smooth else 1.0

    coeffs = params.temporal_coeffs
    total = params.burn_in + params.t_steps
    latent = np.zeros((total,) + shape)
    for s in range(total):
        noise = rng.standard_normal(shape)
        if smooth:
            noise = gaussian_filter(noise, sigma, mode="wrap") / norm
        value = noise
        for j, a in enumerate(coeffs, start=1):
            if s - j >= 0:
                value = value + a * latent[s - j]
        latent[s] = value

    latent = latent[params.burn_in:] / np.sqrt(ar_variance(coeffs))
    scale = np.sqrt(params.base_rate)
    counts = np.clip(np.rint(params.base_rate + scale * latent), 0, None).astype(np.int64)

    logger.debug(
        f"合成グリッド生成: {params.t_steps}x{params.rows}x{params.cols}, AR{list(coeffs)}, "
        f"半径 {params.spatial_kernel_radius}, 平均 {counts.mean():.2f}"
    )
    return SpatioTemporalGrid(
        counts=counts,
        per_type=_split_types(counts, rng),
        spec=_spec(params.rows, params.cols, params.t_steps, params.cell_size_km),
    )


def generate_factor_driven(rows: int, cols: int, t_steps: int, base_rate: float = 4.0,
                           seed: int = 0) -> SpatioTemporalGrid:
    """
    総カウントが前時刻の外部要因 (種別カウント) の非線形関数で決まるグリッド

    type_a(t) ~ Poisson(base_rate) は独立、type_b(t) = floor(type_a(t-1)^2 / 2)。
    座標と時刻だけでは type_b を予測できない。
    """
    if t_steps < 2:
        raise ValueError(f"時間ステップは 2 以上: {t_steps}")
    rng = np.random.default_rng(seed)
    first = rng.poisson(base_rate, size=(t_steps, rows, cols)).astype(np.int64)
    second = np.zeros_like(first)
    second[1:] = first[:-1] ** 2 // 2
    second[0] = rng.poisson(base_rate ** 2 / 2.0, size=(rows, cols))
    return SpatioTemporalGrid(
        counts=first + second,
        per_type={TYPE_NAMES[0]: first, TYPE_NAMES[1]: second},
        spec=_spec(rows, cols, t_steps, 1.0),
    )
