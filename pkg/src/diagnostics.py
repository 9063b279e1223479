"""
相関診断モジュール
ACF / PACF と有意性バンド、空間 PACF、D4 変換とデータ拡張、等方性検定、アーキテクチャ推奨
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import stats

from .ingest import Dataset, GridSpec, SpatioTemporalGrid, build_dataset


logger = logging.getLogger(__name__)

AXES = ("x", "y")
SCOPES = ("all", "top_slices")
MIN_SLICE_LENGTH = 8

D4_NAMES = (
    "identity",
    "rot90",
    "rot180",
    "rot270",
    "vertical_mirror",
    "horizontal_mirror",
    "diagonal_mirror",
    "off_diagonal_mirror",
)

# 行と列が入れ替わる変換
SWAPPING_TRANSFORMS = ("rot90", "rot270", "diagonal_mirror", "off_diagonal_mirror")


@dataclass
class CorrelationCurve:
    """ラグごとの相関値と有意性バンド (lags[0] = 0, values[0] = 1)"""
    lags: np.ndarray
    values: np.ndarray
    band: np.ndarray
    n: int
    alpha: float

    def is_significant(self, lag: int) -> bool:
        """指定ラグの値がバンドの外にあるか"""
        if lag < 1 or lag >= len(self.values):
            raise ValueError(f"ラグ {lag} は曲線の範囲外です (最大 {len(self.values) - 1})")
        return bool(abs(self.values[lag]) > self.band[lag])

    def to_csv(self) -> str:
        lines = ["lag,value,band"]
        lines += [f"{int(k)},{v:.10f},{b:.10f}" for k, v, b in zip(self.lags, self.values, self.band)]
        return "\n".join(lines) + "\n"


@dataclass
class IsotropyReport:
    """等方性検定の結果"""
    aggregated_grid: np.ndarray
    symmetry_deviations: Dict[str, float]
    isotropic: bool
    threshold: float
    n_sampled: int = 0


@dataclass
class Prescription:
    """相関構造から推奨されるアーキテクチャ"""
    architecture: str
    temporal_significant: bool
    spatial_significant: bool
    history_dependent_appropriate: bool
    notes: List[str] = field(default_factory=list)


def _z_value(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"有意水準は (0, 1): {alpha}")
    return float(stats.norm.ppf(1.0 - alpha / 2.0))


def acf(series, max_lag: int, alpha: float = 0.05) -> CorrelationCurve:
    """
    自己相関関数

    rho(k) = [1/(n-k) Σ_{t>k} d_t d_{t-k}] / [sqrt(1/n Σ d_t^2) sqrt(1/(n-k) Σ_{t>k} d_{t-k}^2)]
    バンドは ±z sqrt((1/n)(1 + 2 Σ_{i<=k} rho(i)^2))。

    Args:
        series: 1 次元系列
        max_lag: 最大ラグ
        alpha: 有意水準

    Returns:
        CorrelationCurve
    """
    y = np.asarray(series, dtype=float).ravel()
    n = y.size
    if max_lag < 1 or n <= max_lag + 1:
        raise ValueError(f"系列長 {n} に対して最大ラグ {max_lag} が大きすぎます")

    dev = y - y.mean()
    variance = float(np.mean(dev * dev))
    if variance <= 1e-12 * max(1.0, float(np.mean(y * y))):
        raise ValueError("分散が 0 の系列です")

    values = np.empty(max_lag + 1)
    values[0] = 1.0
    for k in range(1, max_lag + 1):
        lead, lagged = dev[k:], dev[:-k]
        numerator = float(np.dot(lead, lagged)) / (n - k)
        lagged_scale = np.sqrt(float(np.dot(lagged, lagged)) / (n - k))
        denominator = np.sqrt(variance) * lagged_scale
        values[k] = numerator / denominator if denominator > 0 else 0.0
    values = np.clip(values, -1.0, 1.0)

    z = _z_value(alpha)
    cumulative = np.concatenate([[0.0], np.cumsum(values[1:] ** 2)])
    band = z * np.sqrt((1.0 + 2.0 * cumulative) / n)
    return CorrelationCurve(np.arange(max_lag + 1), values, band, n, alpha)


def durbin_levinson(rho: np.ndarray, max_lag: int) -> np.ndarray:
    """自己相関列から偏自己相関 phi(k, k) を求める (戻り値[0] = 1)"""
    phi = np.zeros((max_lag + 1, max_lag + 1))
    partial = np.empty(max_lag + 1)
    partial[0] = 1.0
    phi[1, 1] = rho[1]
    partial[1] = rho[1]

    for k in range(2, max_lag + 1):
        prev = phi[k - 1, 1:k]
        numerator = rho[k] - np.dot(prev, rho[k - 1:0:-1])
        denominator = 1.0 - np.dot(prev, rho[1:k])
        phi[k, k] = numerator / denominator
        phi[k, 1:k] = prev - phi[k, k] * prev[::-1]
        partial[k] = phi[k, k]
    return partial


def pacf(series, max_lag: int, alpha: float = 0.05) -> CorrelationCurve:
    """
    偏自己相関関数 (Durbin-Levinson 再帰, phi(1,1) = rho(1))

    バンドは ±z / sqrt(n)。max_lag は n/4 未満であること。
    """
    y = np.asarray(series, dtype=float).ravel()
    n = y.size
    if max_lag < 1 or max_lag >= n / 4.0:
        raise ValueError(f"最大ラグ {max_lag} は系列長 {n} の 1/4 未満である必要があります")

    rho = acf(y, max_lag, alpha).values
    values = np.clip(durbin_levinson(rho, max_lag), -1.0, 1.0)
    band = np.full(max_lag + 1, _z_value(alpha) / np.sqrt(n))
    return CorrelationCurve(np.arange(max_lag + 1), values, band, n, alpha)


def temporal_series(grid: SpatioTemporalGrid) -> np.ndarray:
    """時間ステップごとの全セル合計"""
    return grid.counts.sum(axis=(1, 2)).astype(float)


def time_averaged(grid: SpatioTemporalGrid) -> np.ndarray:
    return grid.counts.mean(axis=0)


def spatial_pacf(grid: SpatioTemporalGrid, axis: str, scope: str = "all",
                 max_lag: Optional[int] = None, top_k: int = 10,
                 alpha: float = 0.05) -> CorrelationCurve:
    """
    時間平均マップの行 (x) または列 (y) に沿った PACF をカウント重み付きで平均

    Args:
        grid: 入力グリッド
        axis: "x" は東西方向の系列 (各行)、"y" は南北方向の系列 (各列)
        scope: "all" は全スライス、"top_slices" は合計カウント上位 top_k スライス
        max_lag: 最大ラグ (スライス長の 1/4 未満に切り詰める)
        top_k: 高密度スライス数
        alpha: 有意水準

    Returns:
        平均化した CorrelationCurve (n はスライス長)
    """
    if axis not in AXES:
        raise ValueError(f"軸は x または y: {axis}")
    if scope not in SCOPES:
        raise ValueError(f"範囲は all または top_slices: {scope}")

    avg_map = time_averaged(grid)
    slices = avg_map if axis == "x" else avg_map.T
    length = slices.shape[1]
    if length < MIN_SLICE_LENGTH:
        raise ValueError(f"{axis} 方向のセル数 {length} が {MIN_SLICE_LENGTH} 未満です")

    lag_cap = (length - 1) // 4
    lag = lag_cap if max_lag is None else min(max_lag, lag_cap)
    lag = max(lag, 1)

    totals = slices.sum(axis=1)
    order = np.argsort(-totals, kind="stable")
    if scope == "top_slices":
        order = order[:top_k]

    curves, weights = [], []
    for index in order:
        row = slices[index]
        if np.ptp(row) == 0:
            continue
        curves.append(pacf(row, lag, alpha).values)
        weights.append(totals[index])

    if not curves:
        raise ValueError(f"{axis} 方向のスライスがすべて定数です")

    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum() if weights.sum() > 0 else np.full(len(curves), 1.0 / len(curves))
    values = np.sum(weights[:, None] * np.asarray(curves), axis=0)
    band = np.full(lag + 1, _z_value(alpha) / np.sqrt(length))
    return CorrelationCurve(np.arange(lag + 1), values, band, length, alpha)


def _transform(name: str, matrix: np.ndarray, axes: Tuple[int, int] = (0, 1)) -> np.ndarray:
    transposed = np.swapaxes(matrix, *axes)
    if name == "identity":
        return matrix.copy()
    if name == "rot90":
        return np.rot90(matrix, 1, axes=axes)
    if name == "rot180":
        return np.rot90(matrix, 2, axes=axes)
    if name == "rot270":
        return np.rot90(matrix, 3, axes=axes)
    if name == "vertical_mirror":
        return np.rot90(transposed, 1, axes=axes)
    if name == "horizontal_mirror":
        return np.rot90(transposed, 3, axes=axes)
    if name == "diagonal_mirror":
        return transposed.copy()
    if name == "off_diagonal_mirror":
        return np.rot90(transposed, 2, axes=axes)
    raise ValueError(f"未知の D4 変換: {name}")


def d4_transforms(matrix: np.ndarray) -> Dict[str, np.ndarray]:
    """
    2 次元配列の 8 つの対称変換

    鏡映は転置と回転の合成: 垂直 = 転置+90°, 水平 = 転置+270°,
    対角 = 転置, 反対角 = 転置+180°。
    """
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"2 次元配列が必要です: {matrix.shape}")
    return {name: np.ascontiguousarray(_transform(name, matrix)) for name in D4_NAMES}


def _transformed_spec(spec: GridSpec, swapped: bool) -> GridSpec:
    if not swapped:
        return spec
    return replace(
        spec,
        rows=spec.cols,
        cols=spec.rows,
        cell_size=(spec.cell_size[1], spec.cell_size[0]),
    )


def augment_grid(grid: SpatioTemporalGrid) -> Dict[str, SpatioTemporalGrid]:
    """グリッド全体 (全時刻・全種別) に 8 つの D4 変換を適用"""
    augmented = {}
    for name in D4_NAMES:
        counts = np.ascontiguousarray(_transform(name, grid.counts, axes=(1, 2)))
        per_type = {
            kind: np.ascontiguousarray(_transform(name, tensor, axes=(1, 2)))
            for kind, tensor in grid.per_type.items()
        }
        augmented[name] = SpatioTemporalGrid(
            counts=counts,
            per_type=per_type,
            spec=_transformed_spec(grid.spec, name in SWAPPING_TRANSFORMS),
            ingest_stats=dict(grid.ingest_stats),
        )
    return augmented


def augment_dataset(grid: SpatioTemporalGrid, active_cells_only: bool = False) -> Dataset:
    """8 つの変換グリッドから作ったデータセットを連結 (元の 8 倍のサンプル)"""
    return Dataset.concat([
        build_dataset(g, active_cells_only=active_cells_only) for g in augment_grid(grid).values()
    ])


def _standardize(counts: np.ndarray) -> np.ndarray:
    """セルごとに時系列を標準化 (定数系列は 0)"""
    series = counts.astype(float)
    centered = series - series.mean(axis=0)
    scale = series.std(axis=0)
    return np.divide(centered, scale, out=np.zeros_like(centered), where=scale > 0)


def _window_correlation(z: np.ndarray, row: int, col: int, half: int) -> np.ndarray:
    block = z[:, row - half:row + half + 1, col - half:col + half + 1]
    corr = np.einsum("t,tij->ij", z[:, row, col], block) / z.shape[0]
    return np.clip(corr, -1.0, 1.0)


def neighbor_correlation(grid: SpatioTemporalGrid, row: int, col: int, window: int = 7) -> np.ndarray:
    """セル (row, col) の時系列と window x window 近傍の Pearson 相関"""
    return _window_correlation(_standardize(grid.counts), row, col, window // 2)


def isotropy_test(grid: SpatioTemporalGrid, window: int = 7, sample_frac: float = 0.25,
                  seed: int = 0, threshold: float = 0.15) -> IsotropyReport:
    """
    近傍相関グリッドの D4 対称性による等方性検定

    内部セルの一部を無作為抽出して近傍相関グリッドを足し合わせ、各変換との
    相対 L2 差がすべて threshold 以下なら等方的と判定する。
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"窓サイズは 3 以上の奇数: {window}")
    if not 0.0 < sample_frac <= 1.0:
        raise ValueError(f"抽出率は (0, 1]: {sample_frac}")

    T, R, C = grid.counts.shape
    if R < window or C < window:
        raise ValueError(f"窓 {window}x{window} がグリッド {R}x{C} を超えています")

    half = window // 2
    interior = [(r, c) for r in range(half, R - half) for c in range(half, C - half)]
    n_sample = min(len(interior), max(1, int(round(sample_frac * len(interior)))))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(interior), size=n_sample, replace=False))

    z = _standardize(grid.counts)
    aggregated = np.zeros((window, window))
    for index in chosen:
        r, c = interior[index]
        aggregated += _window_correlation(z, r, c, half)

    norm = np.linalg.norm(aggregated)
    deviations = {}
    for name, transformed in d4_transforms(aggregated).items():
        deviations[name] = float(np.linalg.norm(aggregated - transformed) / norm) if norm > 0 else 0.0

    isotropic = max(deviations.values()) <= threshold
    logger.debug(f"等方性検定: 抽出 {n_sample} セル, 最大偏差 {max(deviations.values()):.4f}")
    return IsotropyReport(aggregated, deviations, isotropic, threshold, n_sample)


def prescribe(temporal: CorrelationCurve, spatial_x: CorrelationCurve, spatial_y: CorrelationCurve,
              spatial_hd_x: CorrelationCurve, spatial_hd_y: CorrelationCurve) -> Prescription:
    """
    PACF の有意性からアーキテクチャを推奨

    時間相関はラグ 1 と 2 がともに有意、空間相関は高密度スライスのラグ 1 が両軸で有意な場合。
    """
    if len(temporal.values) < 3:
        raise ValueError("時間 PACF にはラグ 2 までが必要です")

    lag1 = temporal.is_significant(1)
    lag2 = temporal.is_significant(2)
    temporal_significant = lag1 and lag2
    spatial_significant = spatial_hd_x.is_significant(1) and spatial_hd_y.is_significant(1)

    if temporal_significant and spatial_significant:
        architecture = "hdgtwnn_ls"
    elif temporal_significant:
        architecture = "hdgtwnn"
    elif spatial_significant:
        architecture = "gtwnn_ls"
    else:
        architecture = "gtwnn"

    notes = [
        f"時間 PACF ラグ1: {temporal.values[1]:+.3f} ({'有意' if lag1 else '非有意'}, バンド ±{temporal.band[1]:.3f})",
        f"時間 PACF ラグ2: {temporal.values[2]:+.3f} ({'有意' if lag2 else '非有意'}, バンド ±{temporal.band[2]:.3f})",
        f"空間 PACF ラグ1 (全体): x {spatial_x.values[1]:+.3f}, y {spatial_y.values[1]:+.3f}",
        f"空間 PACF ラグ1 (高密度): x {spatial_hd_x.values[1]:+.3f}, y {spatial_hd_y.values[1]:+.3f}",
    ]
    if not lag2:
        notes.append("ラグ2 が非有意のため履歴依存モデル (hdgtwnn 系) は不適")

    return Prescription(architecture, temporal_significant, spatial_significant, lag2, notes)


@dataclass
class DiagnosticsReport:
    """診断結果一式"""
    temporal_acf: CorrelationCurve
    temporal_pacf: CorrelationCurve
    spatial: Dict[str, CorrelationCurve]
    isotropy: Optional[IsotropyReport]
    prescription: Prescription

    def to_text(self) -> str:
        lines = ["# 相関診断レポート", ""]
        lines.append("## 時間 PACF")
        lines += [f"  ラグ {int(k)}: {v:+.4f}  (バンド ±{b:.4f})"
                  for k, v, b in zip(self.temporal_pacf.lags[1:], self.temporal_pacf.values[1:],
                                     self.temporal_pacf.band[1:])]
        lines.append("")
        lines.append("## 空間 PACF (ラグ1)")
        for name, curve in self.spatial.items():
            mark = "有意" if curve.is_significant(1) else "非有意"
            lines.append(f"  {name}: {curve.values[1]:+.4f}  (バンド ±{curve.band[1]:.4f}, {mark})")
        lines.append("")
        if self.isotropy is not None:
            lines.append("## 等方性検定")
            lines.append(f"  判定: {'等方的' if self.isotropy.isotropic else '非等方的'} "
                         f"(閾値 {self.isotropy.threshold})")
            lines += [f"  {name}: {dev:.4f}" for name, dev in self.isotropy.symmetry_deviations.items()]
            lines.append("")
        lines.append("## 推奨アーキテクチャ")
        lines.append(f"  {self.prescription.architecture}")
        lines += [f"  - {note}" for note in self.prescription.notes]
        return "\n".join(lines) + "\n"


def run_diagnostics(grid: SpatioTemporalGrid, max_lag: int = 10, alpha: float = 0.05,
                    window: int = 7, sample_frac: float = 0.25, threshold: float = 0.15,
                    top_k: int = 10, seed: int = 0) -> DiagnosticsReport:
    """時間・空間 PACF、等方性検定、推奨をまとめて実行"""
    series = temporal_series(grid)
    temporal_lag = min(max_lag, (series.size - 1) // 4)
    if temporal_lag < 2:
        raise ValueError(f"時間ステップ {series.size} では時間 PACF のラグ 2 を計算できません")

    temporal_acf = acf(series, temporal_lag, alpha)
    temporal_pacf = pacf(series, temporal_lag, alpha)
    spatial = {
        f"{axis}_{scope}": spatial_pacf(grid, axis, scope, max_lag, top_k, alpha)
        for scope in SCOPES for axis in AXES
    }

    isotropy = None
    R, C = grid.counts.shape[1:]
    if R >= window and C >= window:
        isotropy = isotropy_test(grid, window, sample_frac, seed, threshold)
    else:
        logger.warning(f"グリッド {R}x{C} が窓 {window} より小さいため等方性検定を省略します")

    prescription = prescribe(temporal_pacf, spatial["x_all"], spatial["y_all"],
                             spatial["x_top_slices"], spatial["y_top_slices"])
    return DiagnosticsReport(temporal_acf, temporal_pacf, spatial, isotropy, prescription)
