"""
モデル構成モジュール
全結合ブロックを 8 種類のアーキテクチャに配線し、ターゲットブロックを組み立てる

  vanilla      (x, y, t) -> スタック -> 1 出力                         plain_mse
  gwann        (x, y, t) -> スタック -> 3x3 = 9 出力                   spatial_weighted
  gtwnn        (x, y, t) -> ブロック1 -> beta(t)
               beta(t) ⊙ (1, EF_t) -> ブロック2 -> 1 出力             plain_mse
  gtwnn_ls     同上、9 出力                                            spatial_weighted
  gtwnn_lst    同上、3x3x3 = 27 出力 (t-1, t, t+1)                     spatiotemporal_weighted
  hdgtwnn      (x, y, t) -> ブロック1 -> beta(t-1)
               beta(t-1) ⊙ (1, EF_{t-1}) -> ブロック2 -> beta(t)
               beta(t) ⊙ (1, EF_t) -> ブロック3 -> 1 出力             plain_mse
  hdgtwnn_ls   同上、9 出力                                            spatial_weighted
  hdgtwnn_lst  同上、27 出力                                           spatiotemporal_weighted
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn_core
from .container import read_container, write_container
from .ingest import Dataset, Sample, SpatioTemporalGrid
from .nn_core import LayerParams, LossKind, TrainingBatch


logger = logging.getLogger(__name__)

ARCHITECTURES = (
    "vanilla", "gwann",
    "gtwnn", "gtwnn_ls", "gtwnn_lst",
    "hdgtwnn", "hdgtwnn_ls", "hdgtwnn_lst",
)

OUTPUT_WIDTH = {
    "vanilla": 1, "gwann": 9,
    "gtwnn": 1, "gtwnn_ls": 9, "gtwnn_lst": 27,
    "hdgtwnn": 1, "hdgtwnn_ls": 9, "hdgtwnn_lst": 27,
}

DEFAULT_LOSS_TAG = {
    "vanilla": nn_core.PLAIN_MSE,
    "gwann": nn_core.SPATIAL_WEIGHTED,
    "gtwnn": nn_core.PLAIN_MSE,
    "gtwnn_ls": nn_core.SPATIAL_WEIGHTED,
    "gtwnn_lst": nn_core.SPATIOTEMPORAL_WEIGHTED,
    "hdgtwnn": nn_core.PLAIN_MSE,
    "hdgtwnn_ls": nn_core.SPATIAL_WEIGHTED,
    "hdgtwnn_lst": nn_core.SPATIOTEMPORAL_WEIGHTED,
}

# ネットワーク入力は (easting_km, northing_km, t)
INPUT_DIM = 3


def check_architecture(kind: str) -> str:
    if kind not in ARCHITECTURES:
        raise ValueError(f"未知のアーキテクチャ: '{kind}' (有効: {', '.join(ARCHITECTURES)})")
    return kind


def family_of(kind: str) -> str:
    """'plain' / 'gt' / 'hd' のいずれか"""
    check_architecture(kind)
    if kind.startswith("hdgtwnn"):
        return "hd"
    if kind.startswith("gtwnn"):
        return "gt"
    return "plain"


def max_hidden_layers(kind: str) -> int:
    return 5 if family_of(kind) == "plain" else 3


@dataclass(frozen=True)
class ArchitectureSpec:
    """アーキテクチャ種別とブロック共通の隠れ層構成"""
    kind: str
    hidden_layers: int
    neurons: Tuple[int, ...]
    n_types: int = 2

    def __post_init__(self):
        check_architecture(self.kind)
        object.__setattr__(self, "neurons", tuple(int(n) for n in self.neurons))
        limit = max_hidden_layers(self.kind)
        if not 1 <= self.hidden_layers <= limit:
            raise ValueError(f"{self.kind} の隠れ層数は 1..{limit}: {self.hidden_layers}")
        if len(self.neurons) != self.hidden_layers:
            raise ValueError(f"ニューロン数の長さ {len(self.neurons)} が隠れ層数 {self.hidden_layers} と一致しません")
        if any(n < 1 for n in self.neurons):
            raise ValueError(f"ニューロン数は 1 以上: {self.neurons}")
        if self.n_types < 1:
            raise ValueError(f"種別数は 1 以上: {self.n_types}")

    @property
    def family(self) -> str:
        return family_of(self.kind)

    @property
    def output_width(self) -> int:
        return OUTPUT_WIDTH[self.kind]

    @property
    def beta_width(self) -> int:
        return self.n_types + 1

    def block_sizes(self) -> List[List[int]]:
        """ブロックごとの [入力, 隠れ..., 出力]"""
        hidden = list(self.neurons)
        if self.family == "plain":
            return [[INPUT_DIM] + hidden + [self.output_width]]
        first = [INPUT_DIM] + hidden + [self.beta_width]
        last = [self.beta_width] + hidden + [self.output_width]
        if self.family == "gt":
            return [first, last]
        middle = [self.beta_width] + hidden + [self.beta_width]
        return [first, middle, last]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "hidden_layers": self.hidden_layers,
            "neurons": list(self.neurons),
            "n_types": self.n_types,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ArchitectureSpec":
        return cls(
            kind=data["kind"],
            hidden_layers=int(data["hidden_layers"]),
            neurons=tuple(data["neurons"]),
            n_types=int(data.get("n_types", 2)),
        )

    def describe(self) -> str:
        return f"{self.kind}[{'-'.join(str(n) for n in self.neurons)}]"


@dataclass
class TargetBlock:
    """1 サンプル分のターゲット (平坦化済み)"""
    values: np.ndarray
    mask: np.ndarray
    distances: np.ndarray
    time_offsets: np.ndarray


def _with_bias_channel(ef: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((ef.shape[0], 1)), ef])


class SpatioTemporalNetwork:
    """アーキテクチャ仕様に従って配線されたネットワーク"""

    def __init__(self, spec: ArchitectureSpec, blocks: List[List[LayerParams]]):
        """
        初期化

        Args:
            spec: アーキテクチャ仕様
            blocks: ブロックごとの層パラメータ
        """
        expected = spec.block_sizes()
        if len(blocks) != len(expected):
            raise ValueError(f"ブロック数 {len(blocks)} が {spec.kind} の {len(expected)} と一致しません")
        for b, (block, sizes) in enumerate(zip(blocks, expected)):
            actual = [block[0].fan_in] + [layer.fan_out for layer in block]
            if actual != sizes:
                raise ValueError(f"ブロック {b} の層サイズ {actual} が期待値 {sizes} と一致しません")
        self.spec = spec
        self.blocks = blocks

    @property
    def output_width(self) -> int:
        return self.spec.output_width

    def parameters(self) -> List[LayerParams]:
        return [layer for block in self.blocks for layer in block]

    def set_parameters(self, params: Sequence[LayerParams]):
        params = list(params)
        rebuilt = []
        offset = 0
        for block in self.blocks:
            rebuilt.append(params[offset:offset + len(block)])
            offset += len(block)
        if offset != len(params):
            raise ValueError("パラメータ数が一致しません")
        self.blocks = rebuilt

    def copy(self) -> "SpatioTemporalNetwork":
        return SpatioTemporalNetwork(self.spec, [[layer.copy() for layer in block] for block in self.blocks])

    def count_parameters(self) -> int:
        return sum(layer.size for layer in self.parameters())

    def _check_ef(self, ef: np.ndarray, label: str):
        if ef.ndim != 2 or ef.shape[1] != self.spec.n_types:
            raise ValueError(f"{label} の次元 {ef.shape} が種別数 {self.spec.n_types} と一致しません")

    def forward_arrays(self, inputs: np.ndarray, ef_t: np.ndarray,
                       ef_tm1: np.ndarray) -> Tuple[np.ndarray, Dict[str, Any]]:
        """配列入力での順伝播。戻り値は (出力 (n, B), キャッシュ)"""
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        family = self.spec.family

        if family == "plain":
            out, tape = nn_core.forward(self.blocks[0], inputs)
            return out, {"tapes": [tape]}

        ef_t = np.atleast_2d(np.asarray(ef_t, dtype=float))
        self._check_ef(ef_t, "EF_t")
        beta_first, tape1 = nn_core.forward(self.blocks[0], inputs)

        if family == "gt":
            aug_t = _with_bias_channel(ef_t)
            out, tape2 = nn_core.forward(self.blocks[1], beta_first * aug_t)
            return out, {"tapes": [tape1, tape2], "aug": [aug_t], "beta_t": beta_first}

        ef_tm1 = np.atleast_2d(np.asarray(ef_tm1, dtype=float))
        self._check_ef(ef_tm1, "EF_{t-1}")
        aug_tm1 = _with_bias_channel(ef_tm1)
        beta_t, tape2 = nn_core.forward(self.blocks[1], beta_first * aug_tm1)
        aug_t = _with_bias_channel(ef_t)
        out, tape3 = nn_core.forward(self.blocks[2], beta_t * aug_t)
        return out, {
            "tapes": [tape1, tape2, tape3],
            "aug": [aug_tm1, aug_t],
            "beta_tm1": beta_first,
            "beta_t": beta_t,
        }

    def forward(self, batch: TrainingBatch) -> Tuple[np.ndarray, Dict[str, Any]]:
        return self.forward_arrays(batch.inputs, batch.ef_t, batch.ef_tm1)

    def backward(self, cache: Dict[str, Any], grad_outputs: np.ndarray) -> List[LayerParams]:
        """出力勾配から全パラメータの勾配を計算 (parameters() と同順)"""
        tapes = cache["tapes"]
        family = self.spec.family

        if family == "plain":
            grads, _ = nn_core.backward(self.blocks[0], tapes[0], grad_outputs)
            return grads

        if family == "gt":
            grads_last, grad_z = nn_core.backward(self.blocks[1], tapes[1], grad_outputs)
            grads_first, _ = nn_core.backward(self.blocks[0], tapes[0], grad_z * cache["aug"][0])
            return grads_first + grads_last

        aug_tm1, aug_t = cache["aug"]
        grads_last, grad_z2 = nn_core.backward(self.blocks[2], tapes[2], grad_outputs)
        grads_mid, grad_z1 = nn_core.backward(self.blocks[1], tapes[1], grad_z2 * aug_t)
        grads_first, _ = nn_core.backward(self.blocks[0], tapes[0], grad_z1 * aug_tm1)
        return grads_first + grads_mid + grads_last

    def betas(self, inputs: np.ndarray, ef_t: np.ndarray, ef_tm1: np.ndarray) -> Dict[str, np.ndarray]:
        """
        空間・時間で変化する係数 beta を取得

        Returns:
            gtwnn 系は {"beta_t"}、hdgtwnn 系は {"beta_tm1", "beta_t"}。各 (n, n_types+1)
        """
        _, cache = self.forward_arrays(inputs, ef_t, ef_tm1)
        return {key: cache[key] for key in ("beta_tm1", "beta_t") if key in cache}


def _block_seeds(seed: int, n_blocks: int) -> List[int]:
    children = np.random.SeedSequence(seed).spawn(n_blocks)
    return [int(child.generate_state(1)[0]) for child in children]


def build_model(spec: ArchitectureSpec, seed: int) -> SpatioTemporalNetwork:
    """
    アーキテクチャ仕様からネットワークを構築

    Args:
        spec: アーキテクチャ仕様
        seed: 初期化シード (ブロックごとに派生)

    Returns:
        初期化済みネットワーク
    """
    check_architecture(spec.kind)
    sizes = spec.block_sizes()
    blocks = [
        nn_core.init_network(block_sizes, block_seed, name=f"block{b}.layer")
        for b, (block_sizes, block_seed) in enumerate(zip(sizes, _block_seeds(seed, len(sizes))))
    ]
    logger.debug(f"モデル構築: {spec.describe()} ブロック {sizes}")
    return SpatioTemporalNetwork(spec, blocks)


def default_loss(kind: str, bandwidth_h: float = 1.0, bandwidth_ht: float = 1.0) -> LossKind:
    """アーキテクチャ標準の損失関数"""
    return LossKind(DEFAULT_LOSS_TAG[check_architecture(kind)], bandwidth_h, bandwidth_ht)


def block_offsets(width: int) -> List[Tuple[int, int, int]]:
    """
    平坦化順の (dt, dr, dc) オフセット

    時間 (t-1, t, t+1) の昇順 -> 行は北 (上) から南 -> 列は西から東。
    行 0 が最南端なので dr は +1 から始まる。中心は 0 / 4 / 13 番目。
    """
    if width == 1:
        return [(0, 0, 0)]
    spatial = [(dr, dc) for dr in (1, 0, -1) for dc in (-1, 0, 1)]
    if width == 9:
        return [(0, dr, dc) for dr, dc in spatial]
    if width == 27:
        return [(dt, dr, dc) for dt in (-1, 0, 1) for dr, dc in spatial]
    raise ValueError(f"未対応のターゲット幅: {width}")


def _block_arrays(grid: SpatioTemporalGrid, t: np.ndarray, row: np.ndarray, col: np.ndarray,
                  width: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    T, R, C = grid.counts.shape
    cell_w, cell_h = grid.spec.cell_size
    offsets = np.array(block_offsets(width))              # (B, 3)
    dt, dr, dc = offsets[:, 0], offsets[:, 1], offsets[:, 2]

    tt = t[:, None] + dt[None, :]
    rr = row[:, None] + dr[None, :]
    cc = col[:, None] + dc[None, :]
    valid = (tt >= 0) & (tt < T) & (rr >= 0) & (rr < R) & (cc >= 0) & (cc < C)

    values = grid.counts[np.clip(tt, 0, T - 1), np.clip(rr, 0, R - 1), np.clip(cc, 0, C - 1)].astype(float)
    values = np.where(valid, values, 0.0)
    distances = np.broadcast_to(np.sqrt((dc * cell_w) ** 2 + (dr * cell_h) ** 2), values.shape).copy()
    time_offsets = np.broadcast_to(dt.astype(float), values.shape).copy()
    return values, valid.astype(float), distances, time_offsets


def assemble_target(grid: SpatioTemporalGrid, sample: Sample, kind: str) -> TargetBlock:
    """
    1 サンプルのターゲットブロックを組み立てる

    グリッド外や最終時刻の先の近傍はマスク 0 (値 0)。
    """
    width = OUTPUT_WIDTH[check_architecture(kind)]
    values, mask, distances, time_offsets = _block_arrays(
        grid, np.array([sample.t]), np.array([sample.row]), np.array([sample.col]), width)
    return TargetBlock(values[0], mask[0], distances[0], time_offsets[0])


def assemble_targets(grid: SpatioTemporalGrid, dataset: Dataset, kind: str) -> TargetBlock:
    """データセット全体のターゲットブロック (各配列は (n, B))"""
    width = OUTPUT_WIDTH[check_architecture(kind)]
    return TargetBlock(*_block_arrays(grid, dataset.t, dataset.row, dataset.col, width))


def make_training_batch(grid: SpatioTemporalGrid, dataset: Dataset, kind: str) -> TrainingBatch:
    """データセットとグリッドから学習バッチを作る"""
    block = assemble_targets(grid, dataset, kind)
    return TrainingBatch(
        inputs=dataset.coords,
        ef_t=dataset.ef_t,
        ef_tm1=dataset.ef_tm1,
        targets=block.values,
        mask=block.mask,
        distances=block.distances,
        time_offsets=block.time_offsets,
    )


def concat_batches(batches: Sequence[TrainingBatch]) -> TrainingBatch:
    """複数の学習バッチを連結"""
    return TrainingBatch(*(np.concatenate([getattr(b, name) for b in batches])
                           for name in ("inputs", "ef_t", "ef_tm1", "targets", "mask",
                                        "distances", "time_offsets")))


def predict_batch(model: SpatioTemporalNetwork, dataset: Dataset) -> np.ndarray:
    """データセット全サンプルの中心セル予測"""
    out, _ = model.forward_arrays(dataset.coords, dataset.ef_t, dataset.ef_tm1)
    return out[:, model.output_width // 2].copy()


def predict(model: SpatioTemporalNetwork, sample: Sample) -> float:
    """1 サンプルの中心セル予測"""
    out, _ = model.forward_arrays(
        np.array([sample.coords]), np.array([sample.ef_t]), np.array([sample.ef_tm1]))
    return float(out[0, model.output_width // 2])


def save_checkpoint(model: SpatioTemporalNetwork, path: str, extra: Optional[Dict[str, Any]] = None):
    """チェックポイントを保存 (重みは float64 のままビット単位で保存)"""
    meta = {
        "kind": "checkpoint",
        "architecture": model.spec.to_dict(),
        "block_sizes": model.spec.block_sizes(),
        "extra": extra or {},
    }
    arrays = {}
    for b, block in enumerate(model.blocks):
        for l, layer in enumerate(block):
            arrays[f"block{b}/layer{l}/weights"] = layer.weights
            arrays[f"block{b}/layer{l}/biases"] = layer.biases
    write_container(path, meta, arrays)


def load_checkpoint(path: str) -> Tuple[SpatioTemporalNetwork, Dict[str, Any]]:
    """チェックポイントを読み込む。戻り値は (モデル, extra)"""
    meta, arrays = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"チェックポイントではありません: {path}")
    spec = ArchitectureSpec.from_dict(meta["architecture"])
    blocks = []
    for b, sizes in enumerate(meta["block_sizes"]):
        blocks.append([
            LayerParams(arrays[f"block{b}/layer{l}/weights"], arrays[f"block{b}/layer{l}/biases"],
                        name=f"block{b}.layer{l}")
            for l in range(len(sizes) - 1)
        ])
    return SpatioTemporalNetwork(spec, blocks), meta.get("extra", {})
