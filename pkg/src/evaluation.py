"""
評価モジュール
MSE / MAPE / R2、時間平均マップ、差分マップ、マップ画像出力
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .container import atomic_write_bytes
from .ingest import Dataset, SpatioTemporalGrid
from .models import SpatioTemporalNetwork, predict_batch


logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-7


@dataclass(frozen=True)
class EvalReport:
    """評価指標"""
    mse: float
    mape: float
    r2: float
    n: int
    epsilon_used: float
    r2_defined: bool = True

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def to_csv(self) -> str:
        lines = ["metric,value"]
        for key, value in self.to_dict().items():
            if isinstance(value, bool):
                lines.append(f"{key},{str(value).lower()}")
            elif isinstance(value, int):
                lines.append(f"{key},{value}")
            else:
                lines.append(f"{key},{value:.12g}")
        return "\n".join(lines) + "\n"


def metrics(predictions, targets, epsilon: float = DEFAULT_EPSILON) -> EvalReport:
    """
    評価指標を計算

    MAPE は mean(|t - o| / max(t, epsilon)) の比率 (百分率ではない)。
    R2 の基準は評価データ自身の平均。ターゲットの分散が 0 なら R2 は NaN。

    Args:
        predictions: 予測値
        targets: 実測値 (>= 0)
        epsilon: MAPE の分母の下限

    Returns:
        EvalReport
    """
    o = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(targets, dtype=float).ravel()
    if o.shape != t.shape:
        raise ValueError(f"予測 {o.shape} と実測 {t.shape} の長さが一致しません")
    if t.size == 0:
        raise ValueError("評価データが空です")
    if epsilon <= 0:
        raise ValueError(f"epsilon は正: {epsilon}")

    residual = t - o
    mse = float(np.mean(residual ** 2))
    mape = float(np.mean(np.abs(residual) / np.maximum(t, epsilon)))

    total = float(np.sum((t - t.mean()) ** 2))
    if total > 0:
        r2 = 1.0 - float(np.sum(residual ** 2)) / total
        r2_defined = True
    else:
        r2 = float("nan")
        r2_defined = False

    return EvalReport(mse=mse, mape=mape, r2=r2, n=int(t.size),
                      epsilon_used=float(epsilon), r2_defined=r2_defined)


def time_averaged_map(grid: SpatioTemporalGrid, t_range: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """期間 [t0, t1) の時間平均マップ"""
    t0, t1 = t_range if t_range is not None else (0, grid.spec.t_steps)
    if not 0 <= t0 < t1 <= grid.spec.t_steps:
        raise ValueError(f"期間 [{t0}, {t1}) が不正です (全 {grid.spec.t_steps} ステップ)")
    return grid.counts[t0:t1].mean(axis=0)


def dataset_map(values, dataset: Dataset, shape: Tuple[int, int]) -> np.ndarray:
    """サンプルごとの値をセルごとに平均したマップ (サンプルのないセルは 0)"""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != len(dataset):
        raise ValueError("値の数とサンプル数が一致しません")
    sums = np.zeros(shape)
    counts = np.zeros(shape)
    np.add.at(sums, (dataset.row, dataset.col), values)
    np.add.at(counts, (dataset.row, dataset.col), 1.0)
    return np.divide(sums, counts, out=np.zeros(shape), where=counts > 0)


def predicted_time_averaged_map(model: SpatioTemporalNetwork, dataset: Dataset,
                                shape: Tuple[int, int]) -> np.ndarray:
    """モデル予測をセルごとに時間平均したマップ"""
    return dataset_map(predict_batch(model, dataset), dataset, shape)


def diff_map(actual: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """実測 - 予測"""
    actual = np.asarray(actual, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if actual.shape != predicted.shape:
        raise ValueError(f"マップ形状が一致しません: {actual.shape} != {predicted.shape}")
    return actual - predicted


def rescale_to_max(source: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """source を最大値が reference の最大値になるように拡大縮小"""
    source = np.asarray(source, dtype=float)
    source_max = float(np.max(source))
    if source_max <= 0:
        raise ValueError("拡大縮小元の最大値が 0 以下です")
    return source * (float(np.max(reference)) / source_max)


def _pixmap_header(magic: str, width: int, height: int) -> bytes:
    return f"{magic}\n{width} {height}\n255\n".encode("ascii")


def write_pgm(path: str, matrix: np.ndarray):
    """グレースケール PGM (北が上、最大値が白)"""
    image = np.flipud(np.asarray(matrix, dtype=float))
    peak = float(np.max(image)) if image.size else 0.0
    scaled = np.zeros_like(image) if peak <= 0 else np.clip(image / peak, 0.0, 1.0)
    pixels = np.rint(scaled * 255).astype(np.uint8)
    atomic_write_bytes(path, _pixmap_header("P5", image.shape[1], image.shape[0]) + pixels.tobytes())


def write_ppm_diverging(path: str, matrix: np.ndarray):
    """発散カラーの PPM (負は青、0 は白、正は赤、北が上)"""
    image = np.flipud(np.asarray(matrix, dtype=float))
    peak = float(np.max(np.abs(image))) if image.size else 0.0
    scaled = np.zeros_like(image) if peak <= 0 else np.clip(image / peak, -1.0, 1.0)

    rgb = np.ones(image.shape + (3,))
    positive = np.clip(scaled, 0.0, 1.0)
    negative = np.clip(-scaled, 0.0, 1.0)
    rgb[..., 1] -= positive + negative
    rgb[..., 2] -= positive
    rgb[..., 0] -= negative
    pixels = np.rint(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)
    atomic_write_bytes(path, _pixmap_header("P6", image.shape[1], image.shape[0]) + pixels.tobytes())
