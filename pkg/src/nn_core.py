"""
ニューラルネットワーク基盤モジュール
全結合層のパラメータ・順伝播・逆伝播・ADAM 更新・重み付き損失・学習ループ
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .performance_monitor import PerformanceMonitor


logger = logging.getLogger(__name__)

RELU = "relu"
LINEAR = "linear"

PLAIN_MSE = "plain_mse"
SPATIAL_WEIGHTED = "spatial_weighted"
SPATIOTEMPORAL_WEIGHTED = "spatiotemporal_weighted"
LOSS_TAGS = (PLAIN_MSE, SPATIAL_WEIGHTED, SPATIOTEMPORAL_WEIGHTED)


@dataclass
class LayerParams:
    """全結合層 1 枚分の重み [出力 x 入力] とバイアス [出力]"""
    weights: np.ndarray
    biases: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.biases = np.asarray(self.biases, dtype=float)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ValueError(f"層 {self.name} の形状が不正です: W{self.weights.shape}, b{self.biases.shape}")

    @property
    def fan_in(self) -> int:
        return int(self.weights.shape[1])

    @property
    def fan_out(self) -> int:
        return int(self.weights.shape[0])

    @property
    def size(self) -> int:
        return int(self.weights.size + self.biases.size)

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.biases.copy(), self.name)

    def zeros_like(self) -> "LayerParams":
        return LayerParams(np.zeros_like(self.weights), np.zeros_like(self.biases), self.name)


@dataclass(frozen=True)
class LossKind:
    """損失関数の種類とカーネルのバンド幅"""
    tag: str = PLAIN_MSE
    bandwidth_h: float = 1.0
    bandwidth_ht: float = 1.0

    def __post_init__(self):
        if self.tag not in LOSS_TAGS:
            raise ValueError(f"未知の損失関数: {self.tag} (対応: {', '.join(LOSS_TAGS)})")
        if self.bandwidth_h <= 0 or self.bandwidth_ht <= 0:
            raise ValueError(f"バンド幅は正である必要があります: h={self.bandwidth_h}, h_t={self.bandwidth_ht}")


@dataclass(frozen=True)
class TrainConfig:
    """学習設定 (ADAM の既定値付き)"""
    epochs: int = 6
    batch_size: int = 10
    seed: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"エポック数は 1 以上: {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"バッチサイズは 1 以上: {self.batch_size}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any], seed: int) -> "TrainConfig":
        return cls(
            epochs=int(data.get("epochs", cls.epochs)),
            batch_size=int(data.get("batch_size", cls.batch_size)),
            seed=seed,
            alpha=float(data.get("alpha", cls.alpha)),
            beta1=float(data.get("beta1", cls.beta1)),
            beta2=float(data.get("beta2", cls.beta2)),
            epsilon=float(data.get("epsilon", cls.epsilon)),
        )


@dataclass
class AdamState:
    """ADAM のモーメント推定値"""
    m: List[LayerParams]
    v: List[LayerParams]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[LayerParams]) -> "AdamState":
        return cls([p.zeros_like() for p in params], [p.zeros_like() for p in params], 0)


@dataclass
class TrainingBatch:
    """ネットワーク入力とターゲットブロックの列指向バッチ"""
    inputs: np.ndarray          # (n, 3)
    ef_t: np.ndarray            # (n, K)
    ef_tm1: np.ndarray          # (n, K)
    targets: np.ndarray         # (n, B)
    mask: np.ndarray            # (n, B)
    distances: np.ndarray       # (n, B) 中心セルからの距離 km
    time_offsets: np.ndarray    # (n, B) 中心からの時間差

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def subset(self, indices: np.ndarray) -> "TrainingBatch":
        return TrainingBatch(
            inputs=self.inputs[indices],
            ef_t=self.ef_t[indices],
            ef_tm1=self.ef_tm1[indices],
            targets=self.targets[indices],
            mask=self.mask[indices],
            distances=self.distances[indices],
            time_offsets=self.time_offsets[indices],
        )


class Trainable(Protocol):
    """学習ループが要求するモデルのインターフェース"""

    def forward(self, batch: TrainingBatch) -> Tuple[np.ndarray, Any]: ...

    def backward(self, cache: Any, grad_outputs: np.ndarray) -> List[LayerParams]: ...

    def parameters(self) -> List[LayerParams]: ...

    def set_parameters(self, params: Sequence[LayerParams]) -> None: ...

    def copy(self) -> "Trainable": ...


@dataclass
class TrainResult:
    """学習結果"""
    model: Any
    loss_trace: List[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")


def init_network(layer_sizes: Sequence[int], seed: int, name: str = "layer") -> List[LayerParams]:
    """
    He 方式の一様分布 U(±sqrt(6/fan_in)) で重みを初期化 (バイアスは 0)

    Args:
        layer_sizes: [入力, 隠れ..., 出力] のユニット数
        seed: 乱数シード
        name: 層名の接頭辞

    Returns:
        LayerParams のリスト
    """
    if len(layer_sizes) < 2:
        raise ValueError(f"層サイズは入力と出力を含む 2 つ以上が必要です: {list(layer_sizes)}")
    if any(int(size) < 1 for size in layer_sizes):
        raise ValueError(f"層サイズは 1 以上が必要です: {list(layer_sizes)}")

    rng = np.random.default_rng(seed)
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        bound = np.sqrt(6.0 / fan_in)
        params.append(LayerParams(
            weights=rng.uniform(-bound, bound, size=(int(fan_out), int(fan_in))),
            biases=np.zeros(int(fan_out)),
            name=f"{name}{i}",
        ))
    return params


def default_activations(n_layers: int) -> List[str]:
    """隠れ層は ReLU、ブロック最終層は線形"""
    return [RELU] * (n_layers - 1) + [LINEAR]


def forward(params: Sequence[LayerParams], x: np.ndarray,
            activations: Optional[Sequence[str]] = None) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray]]]:
    """
    順伝播

    Args:
        params: 層パラメータ
        x: 入力ベクトル (in,) またはバッチ (n, in)
        activations: 層ごとの活性化関数名

    Returns:
        (出力, 逆伝播用テープ [(層入力, 前活性)])
    """
    activations = list(activations or default_activations(len(params)))
    single = np.ndim(x) == 1
    h = np.atleast_2d(np.asarray(x, dtype=float))

    tape = []
    for layer, act in zip(params, activations):
        if h.shape[1] != layer.fan_in:
            raise ValueError(f"層 {layer.name} の入力次元が一致しません: {h.shape[1]} != {layer.fan_in}")
        z = h @ layer.weights.T + layer.biases
        tape.append((h, z))
        h = np.maximum(z, 0.0) if act == RELU else z

    return (h[0] if single else h), tape


def backward(params: Sequence[LayerParams], tape: Sequence[Tuple[np.ndarray, np.ndarray]],
             grad_out: np.ndarray,
             activations: Optional[Sequence[str]] = None) -> Tuple[List[LayerParams], np.ndarray]:
    """
    逆伝播 (バッチ方向に勾配を合計)

    Returns:
        (層ごとの勾配, 入力に対する勾配)
    """
    activations = list(activations or default_activations(len(params)))
    grad = np.atleast_2d(np.asarray(grad_out, dtype=float))
    grads: List[Optional[LayerParams]] = [None] * len(params)

    for i in reversed(range(len(params))):
        layer_in, pre = tape[i]
        if activations[i] == RELU:
            grad = grad * (pre > 0.0)
        grads[i] = LayerParams(grad.T @ layer_in, grad.sum(axis=0), params[i].name)
        grad = grad @ params[i].weights

    return grads, grad


def weight_kernel(d, h: float):
    """空間ガウスカーネル exp(-(d/h)^2 / 2)"""
    if h <= 0:
        raise ValueError(f"バンド幅は正である必要があります: {h}")
    value = np.exp(-0.5 * (np.asarray(d, dtype=float) / h) ** 2)
    return float(value) if np.ndim(value) == 0 else value


def spatiotemporal_kernel(d, tau, h: float, h_t: float):
    """時空間ガウスカーネル exp(-(d/h)^2/2 - (tau/h_t)^2/2)"""
    if h <= 0 or h_t <= 0:
        raise ValueError(f"バンド幅は正である必要があります: h={h}, h_t={h_t}")
    d = np.asarray(d, dtype=float)
    tau = np.asarray(tau, dtype=float)
    value = np.exp(-0.5 * (d / h) ** 2 - 0.5 * (tau / h_t) ** 2)
    return float(value) if np.ndim(value) == 0 else value


def block_weights(batch: TrainingBatch, loss: LossKind) -> np.ndarray:
    """ターゲットブロックの各要素に対する損失の重み (マスク前)"""
    if loss.tag == PLAIN_MSE:
        return np.ones_like(batch.targets, dtype=float)
    if loss.tag == SPATIAL_WEIGHTED:
        return weight_kernel(batch.distances, loss.bandwidth_h)
    return spatiotemporal_kernel(batch.distances, batch.time_offsets, loss.bandwidth_h, loss.bandwidth_ht)


def _loss_terms(outputs: np.ndarray, batch: TrainingBatch, loss: LossKind,
                weights: Optional[np.ndarray]) -> Tuple[float, np.ndarray]:
    if outputs.shape != batch.targets.shape:
        raise ValueError(f"出力形状 {outputs.shape} とターゲット形状 {batch.targets.shape} が一致しません")
    if np.any(batch.mask.sum(axis=1) == 0):
        raise ValueError("全要素がマスクされたターゲットブロックがあります")

    v = block_weights(batch, loss) if weights is None else np.broadcast_to(weights, outputs.shape)
    w = v * batch.mask
    n = len(batch)
    residual = outputs - batch.targets
    value = float(np.sum(w * residual ** 2) / n)
    grad_out = 2.0 * w * residual / n
    return value, grad_out


def loss_value(model: Trainable, batch: TrainingBatch, loss: LossKind,
               weights: Optional[np.ndarray] = None) -> float:
    """損失値のみを計算"""
    outputs, _ = model.forward(batch)
    value, _ = _loss_terms(outputs, batch, loss, weights)
    return value


def loss_and_grad(model: Trainable, batch: TrainingBatch, loss: LossKind,
                  weights: Optional[np.ndarray] = None) -> Tuple[float, List[LayerParams]]:
    """
    損失とパラメータ勾配

    L = (1/n) Σ_サンプル Σ_i m_i v_i (t_i - o_i)^2
    plain_mse は v = 1、空間重み付きは中心からの距離のガウスカーネル、
    時空間重み付きは距離と時間差の分離型カーネル。

    Args:
        model: forward/backward を持つモデル
        batch: 学習バッチ
        loss: 損失関数の種類
        weights: v を明示的に上書きする (B,) または (n, B) 配列

    Returns:
        (損失値, model.parameters() と同順の勾配)
    """
    outputs, cache = model.forward(batch)
    value, grad_out = _loss_terms(outputs, batch, loss, weights)
    return value, model.backward(cache, grad_out)


def adam_step(params: Sequence[LayerParams], grads: Sequence[LayerParams],
              state: AdamState, config: TrainConfig) -> Tuple[List[LayerParams], AdamState]:
    """
    バイアス補正付き ADAM 更新

    Returns:
        (更新後パラメータ, 更新後状態)
    """
    step = state.step + 1
    b1, b2 = config.beta1, config.beta2
    corr1 = 1.0 - b1 ** step
    corr2 = 1.0 - b2 ** step

    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (np.all(np.isfinite(g.weights)) and np.all(np.isfinite(g.biases))):
            raise FloatingPointError(f"勾配に有限でない値があります: 層 {p.name}")

        m_w = b1 * m.weights + (1.0 - b1) * g.weights
        m_b = b1 * m.biases + (1.0 - b1) * g.biases
        v_w = b2 * v.weights + (1.0 - b2) * g.weights ** 2
        v_b = b2 * v.biases + (1.0 - b2) * g.biases ** 2

        w = p.weights - config.alpha * (m_w / corr1) / (np.sqrt(v_w / corr2) + config.epsilon)
        b = p.biases - config.alpha * (m_b / corr1) / (np.sqrt(v_b / corr2) + config.epsilon)

        new_params.append(LayerParams(w, b, p.name))
        new_m.append(LayerParams(m_w, m_b, p.name))
        new_v.append(LayerParams(v_w, v_b, p.name))

    return new_params, AdamState(new_m, new_v, step)


def train(model: Trainable, batch: TrainingBatch, config: TrainConfig, loss: LossKind,
          monitor: Optional[PerformanceMonitor] = None,
          epoch_callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """
    ミニバッチ ADAM で学習 (入力モデルは変更せずコピーを学習)

    Args:
        model: 初期モデル
        batch: 学習データ全体
        config: 学習設定
        loss: 損失関数
        monitor: エポック時間を計測する PerformanceMonitor
        epoch_callback: エポックごとに (epoch, 平均損失) で呼ばれる

    Returns:
        TrainResult (エポックごとの平均バッチ損失の履歴付き)
    """
    n = len(batch)
    if n == 0:
        raise ValueError("学習データが空です")

    trained = model.copy()
    params = trained.parameters()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(config.seed)

    result = TrainResult(model=trained)
    result.initial_loss = loss_value(trained, batch, loss)

    for epoch in range(1, config.epochs + 1):
        if monitor:
            monitor.start_step("train_epoch")

        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            minibatch = batch.subset(order[start:start + config.batch_size])
            value, grads = loss_and_grad(trained, minibatch, loss)
            params, state = adam_step(params, grads, state, config)
            trained.set_parameters(params)
            batch_losses.append(value)

        epoch_loss = float(np.mean(batch_losses))
        result.loss_trace.append(epoch_loss)
        if monitor:
            monitor.finish_step("train_epoch")
        logger.debug(f"エポック {epoch}/{config.epochs}: 損失 {epoch_loss:.6f}")
        if epoch_callback:
            epoch_callback(epoch, epoch_loss)

    result.final_loss = loss_value(trained, batch, loss)
    return result


def numerical_gradient(fn: Callable[[], float], params: Sequence[LayerParams],
                       step: float = 1e-5) -> List[LayerParams]:
    """
    中心差分による数値勾配 (params をその場で摂動し、元に戻す)

    Args:
        fn: 現在のパラメータで損失を返す関数
        params: 摂動対象のパラメータ
        step: 差分幅

    Returns:
        params と同じ形の数値勾配
    """
    grads = []
    for layer in params:
        numeric = layer.zeros_like()
        for source, target in ((layer.weights, numeric.weights), (layer.biases, numeric.biases)):
            flat_src = source.reshape(-1)
            flat_dst = target.reshape(-1)
            for i in range(flat_src.size):
                original = flat_src[i]
                flat_src[i] = original + step
                f_plus = fn()
                flat_src[i] = original - step
                f_minus = fn()
                flat_src[i] = original
                flat_dst[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(numeric)
    return grads


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a|| + ||b||, floor)"""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    denom = max(float(np.linalg.norm(a) + np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b) / denom)


def max_gradient_error(analytic: Sequence[LayerParams], numeric: Sequence[LayerParams],
                       floor: float = 1e-12) -> float:
    """全層・全配列での相対誤差の最大値 (floor は勾配がほぼ 0 の配列の分母の下限)"""
    errors = []
    for a, n in zip(analytic, numeric):
        errors.append(relative_error(a.weights, n.weights, floor))
        errors.append(relative_error(a.biases, n.biases, floor))
    return max(errors) if errors else 0.0
