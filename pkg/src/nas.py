"""
アーキテクチャ探索モジュール
ガウス過程 + 期待改善量によるベイズ最適化で隠れ層構成を探索
"""

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, stats

from .evaluation import DEFAULT_EPSILON, metrics
from .ingest import Dataset
from .models import ArchitectureSpec, build_model, default_loss, family_of, predict_batch
from .nn_core import LossKind, TrainConfig, TrainingBatch, train
from .performance_monitor import PerformanceMonitor


logger = logging.getLogger(__name__)

NeuronConfig = Tuple[int, ...]
Objective = Callable[[NeuronConfig, int], Any]

# 候補の一括評価サイズ (メモリ上限のため)
CHUNK_SIZE = 50000


@dataclass(frozen=True)
class SearchSpace:
    """隠れ層数とニューロン数の探索範囲 (両端を含む)"""
    layers_range: Tuple[int, int] = (1, 3)
    neurons_range: Tuple[int, int] = (1, 15)
    per_layer_neurons: bool = True

    def __post_init__(self):
        lo, hi = self.layers_range
        n_lo, n_hi = self.neurons_range
        if not (1 <= lo <= hi) or not (1 <= n_lo <= n_hi):
            raise ValueError(f"探索範囲が不正です: 層 {self.layers_range}, ニューロン {self.neurons_range}")

    @classmethod
    def for_kind(cls, kind: str, per_layer_neurons: bool = True) -> "SearchSpace":
        """vanilla / gwann は 1..5 層、それ以外は 1..3 層、ニューロンは 1..15"""
        max_layers = 5 if family_of(kind) == "plain" else 3
        return cls((1, max_layers), (1, 15), per_layer_neurons)

    def with_depth(self, depth: int) -> "SearchSpace":
        if not self.layers_range[0] <= depth <= self.layers_range[1]:
            raise ValueError(f"深さ {depth} は範囲 {self.layers_range} の外です")
        return replace(self, layers_range=(depth, depth))

    @property
    def depths(self) -> List[int]:
        return list(range(self.layers_range[0], self.layers_range[1] + 1))

    @property
    def size(self) -> int:
        width = self.neurons_range[1] - self.neurons_range[0] + 1
        if not self.per_layer_neurons:
            return len(self.depths) * width
        return sum(width ** depth for depth in self.depths)

    def enumerate(self) -> List[NeuronConfig]:
        """深さ昇順・辞書順で全構成を列挙"""
        values = range(self.neurons_range[0], self.neurons_range[1] + 1)
        configs: List[NeuronConfig] = []
        for depth in self.depths:
            if self.per_layer_neurons:
                configs.extend(itertools.product(values, repeat=depth))
            else:
                configs.extend((n,) * depth for n in values)
        return configs

    def encode(self, configs: Sequence[NeuronConfig]) -> np.ndarray:
        """[0, 1] に正規化した座標 (深さ, 各層のニューロン数; 無い層は 0)"""
        lo, hi = self.layers_range
        n_lo, n_hi = self.neurons_range
        layer_span = max(hi - lo, 1)
        neuron_span = max(n_hi - n_lo, 1)
        width = 1 + (hi if self.per_layer_neurons else 1)

        encoded = np.zeros((len(configs), width))
        for i, config in enumerate(configs):
            encoded[i, 0] = (len(config) - lo) / layer_span
            neurons = config if self.per_layer_neurons else config[:1]
            for j, n in enumerate(neurons):
                encoded[i, 1 + j] = (n - n_lo) / neuron_span
        return encoded


@dataclass
class TrialResult:
    """1 試行の結果"""
    index: int
    config: NeuronConfig
    objective: float
    mape: float
    r2: float
    seed: int
    wall_time: float

    @property
    def depth(self) -> int:
        return len(self.config)


@dataclass
class SearchResult:
    """ベイズ最適化の結果 (試行は投入順)"""
    trials: List[TrialResult] = field(default_factory=list)

    @property
    def best(self) -> TrialResult:
        finite = [t for t in self.trials if math.isfinite(t.objective)]
        if not finite:
            raise ValueError("有限な目的関数値の試行がありません")
        return min(finite, key=lambda t: (t.objective, t.index))


@dataclass
class DepthRow:
    """深さごとの最良結果"""
    depth: int
    best: TrialResult
    n_trials: int


@dataclass
class SearchReport:
    """深さ別探索の結果"""
    kind: str
    rows: List[DepthRow]
    trials: List[TrialResult]

    @property
    def best(self) -> TrialResult:
        return min((row.best for row in self.rows), key=lambda t: (t.objective, t.depth))

    def depth_table_csv(self) -> str:
        lines = ["depth,neurons,mse,mape,r2,n_trials"]
        for row in self.rows:
            lines.append(
                f"{row.depth},{_format_config(row.best.config)},{row.best.objective:.10g},"
                f"{row.best.mape:.10g},{row.best.r2:.10g},{row.n_trials}"
            )
        return "\n".join(lines) + "\n"

    def trial_log_csv(self) -> str:
        return trial_log_csv(self.trials)


def _format_config(config: NeuronConfig) -> str:
    return "-".join(str(n) for n in config)


def trial_log_csv(trials: Sequence[TrialResult]) -> str:
    lines = ["index,depth,neurons,mse,mape,r2,seed,wall_time"]
    for t in trials:
        lines.append(
            f"{t.index},{t.depth},{_format_config(t.config)},{t.objective:.10g},"
            f"{t.mape:.10g},{t.r2:.10g},{t.seed},{t.wall_time:.3f}"
        )
    return "\n".join(lines) + "\n"


def min_trials_for_top_fraction(p: float, confidence: float) -> int:
    """
    上位割合 p の構成を confidence 以上の確率で 1 つ以上引くのに必要な試行数

    1 - (1 - p)^n >= confidence を満たす最小の n。(0.05, 0.95) は 59。
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"割合 p は (0, 1]: {p}")
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"信頼度は (0, 1): {confidence}")
    if p == 1.0:
        return 1
    needed = math.log(1.0 - confidence) / math.log(1.0 - p)
    return max(1, math.ceil(needed - 1e-9))


def _trial_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _as_outcome(value: Any) -> Tuple[float, float, float]:
    """目的関数の戻り値を (objective, mape, r2) にそろえる"""
    if hasattr(value, "mse"):
        return float(value.mse), float(value.mape), float(value.r2)
    if isinstance(value, (tuple, list)):
        objective, mape, r2 = (list(value) + [float("nan"), float("nan")])[:3]
        return float(objective), float(mape), float(r2)
    return float(value), float("nan"), float("nan")


class GaussianProcess:
    """二乗指数カーネルのガウス過程回帰 (目的値は標準化)"""

    def __init__(self, length_scale: float = 0.3, noise: float = 1e-6):
        """
        初期化

        Args:
            length_scale: 正規化座標でのカーネル長さ
            noise: 対角に加えるノイズ分散
        """
        if length_scale <= 0 or noise < 0:
            raise ValueError(f"GP パラメータが不正です: length_scale={length_scale}, noise={noise}")
        self.length_scale = length_scale
        self.noise = noise

    def kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        sq = (np.sum(a ** 2, axis=1)[:, None] + np.sum(b ** 2, axis=1)[None, :] - 2.0 * a @ b.T)
        return np.exp(-0.5 * np.maximum(sq, 0.0) / self.length_scale ** 2)

    def fit(self, x: np.ndarray, y: np.ndarray) -> "GaussianProcess":
        self.x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        self.y_mean = float(y.mean())
        scale = float(y.std())
        self.y_scale = scale if scale > 0 else 1.0
        self.y_std = (y - self.y_mean) / self.y_scale

        noise = self.noise
        gram = self.kernel(self.x, self.x)
        for _ in range(8):
            try:
                self.chol = linalg.cho_factor(gram + max(noise, 1e-12) * np.eye(len(self.x)), lower=True)
                break
            except linalg.LinAlgError:
                noise = max(noise, 1e-12) * 10.0
        else:
            raise ValueError("GP のカーネル行列を分解できません")
        self.alpha = linalg.cho_solve(self.chol, self.y_std)
        return self

    def predict(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """標準化スケールでの (平均, 標準偏差)"""
        k_star = self.kernel(np.asarray(x, dtype=float), self.x)
        mean = k_star @ self.alpha
        v = linalg.solve_triangular(self.chol[0], k_star.T, lower=True)
        variance = np.maximum(1.0 - np.sum(v ** 2, axis=0), 1e-12)
        return mean, np.sqrt(variance)

    def expected_improvement(self, x: np.ndarray) -> np.ndarray:
        """最小化問題の期待改善量 (標準化スケール)"""
        mean, sd = self.predict(x)
        improvement = float(self.y_std.min()) - mean
        z = improvement / sd
        return np.maximum(improvement * stats.norm.cdf(z) + sd * stats.norm.pdf(z), 0.0)


def _run_trials(indices: Sequence[int], candidates: Sequence[NeuronConfig], objective_fn: Objective,
                seed: int, start_index: int, max_workers: int,
                monitor: Optional[PerformanceMonitor]) -> List[TrialResult]:
    """試行を (必要なら並列に) 実行し、投入順で結果を返す"""

    def run(offset_and_index: Tuple[int, int]) -> TrialResult:
        offset, candidate = offset_and_index
        trial_index = start_index + offset
        trial_seed = _trial_seed(seed, trial_index)
        config = candidates[candidate]
        started = time.perf_counter()
        objective, mape, r2 = _as_outcome(objective_fn(config, trial_seed))
        elapsed = time.perf_counter() - started
        return TrialResult(trial_index, config, objective, mape, r2, trial_seed, elapsed)

    jobs = list(enumerate(indices))
    if max_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            results = list(executor.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    for result in results:
        if monitor:
            monitor.record_step("nas_trial", result.wall_time)
        logger.info(f"試行 {result.index}: {_format_config(result.config)} -> {result.objective:.6f}")
    return results


def bayes_search(space: SearchSpace, objective_fn: Objective, budget: int = 50, seed: int = 0,
                 n_initial: int = 8, length_scale: float = 0.3, noise: float = 1e-6,
                 max_workers: int = 1, monitor: Optional[PerformanceMonitor] = None) -> SearchResult:
    """
    ベイズ最適化で目的関数 (小さいほど良い) を最小化

    min(n_initial, budget) 個の無作為な初期構成の後、GP の期待改善量を全未評価構成で
    最大化して 1 つずつ評価する。予算が構成数以上なら全構成を列挙順に評価する。

    Args:
        space: 探索空間
        objective_fn: (構成, シード) -> 目的値 / (目的値, MAPE, R2) / EvalReport
        budget: 評価回数
        seed: 乱数シード
        n_initial: 初期無作為構成数
        length_scale: GP カーネル長さ
        noise: GP ノイズ分散
        max_workers: 初期構成を並列評価するスレッド数
        monitor: 試行時間を記録する PerformanceMonitor

    Returns:
        SearchResult
    """
    if budget < 2:
        raise ValueError(f"予算は 2 以上: {budget}")
    return _search_stratum(space, objective_fn, budget, seed, n_initial, length_scale, noise,
                           max_workers, monitor)


def _search_stratum(space: SearchSpace, objective_fn: Objective, budget: int, seed: int,
                    n_initial: int, length_scale: float, noise: float, max_workers: int,
                    monitor: Optional[PerformanceMonitor]) -> SearchResult:
    """1 つの深さ層のベイズ最適化 (予算 1 の層も扱う)"""
    candidates = space.enumerate()
    if budget >= len(candidates):
        logger.info(f"予算 {budget} が構成数 {len(candidates)} 以上のため全探索します")
        trials = _run_trials(range(len(candidates)), candidates, objective_fn, seed, 0, max_workers, monitor)
        return SearchResult(trials)

    encoded = space.encode(candidates)
    rng = np.random.default_rng(seed)
    n_init = min(n_initial, budget)
    initial = [int(i) for i in rng.choice(len(candidates), size=n_init, replace=False)]

    trials = _run_trials(initial, candidates, objective_fn, seed, 0, max_workers, monitor)
    evaluated = list(initial)
    evaluated_mask = np.zeros(len(candidates), dtype=bool)
    evaluated_mask[evaluated] = True

    gp = GaussianProcess(length_scale, noise)
    while len(trials) < budget:
        y = np.array([t.objective for t in trials])
        finite = np.isfinite(y)
        fallback = float(y[finite].max()) if finite.any() else 0.0
        gp.fit(encoded[evaluated], np.where(finite, y, fallback))

        best_index, best_ei = -1, -np.inf
        for start in range(0, len(candidates), CHUNK_SIZE):
            stop = min(start + CHUNK_SIZE, len(candidates))
            ei = gp.expected_improvement(encoded[start:stop])
            ei[evaluated_mask[start:stop]] = -np.inf
            local = int(np.argmax(ei))
            if ei[local] > best_ei:
                best_index, best_ei = start + local, float(ei[local])

        trials += _run_trials([best_index], candidates, objective_fn, seed, len(trials), 1, monitor)
        evaluated.append(best_index)
        evaluated_mask[best_index] = True

    return SearchResult(trials)


def split_budget(budget: int, n_strata: int) -> List[int]:
    """
    総予算を層に配分する。余りは先頭の層から 1 つずつ

    例: split_budget(5, 3) == [2, 2, 1]
    """
    if n_strata < 1:
        raise ValueError(f"層の数は 1 以上: {n_strata}")
    base, extra = divmod(budget, n_strata)
    return [base + (1 if i < extra else 0) for i in range(n_strata)]


def random_search(space: SearchSpace, objective_fn: Objective, budget: int = 50,
                  seed: int = 0) -> SearchResult:
    """比較用の無作為探索 (重複なし)"""
    candidates = space.enumerate()
    rng = np.random.default_rng(seed)
    n = min(budget, len(candidates))
    chosen = [int(i) for i in rng.choice(len(candidates), size=n, replace=False)]
    return SearchResult(_run_trials(chosen, candidates, objective_fn, seed, 0, 1, None))


def run_architecture_search(kind: str, train_batch: TrainingBatch, test: Dataset,
                            space: Optional[SearchSpace] = None, budget: int = 50,
                            base_config: TrainConfig = TrainConfig(), loss: Optional[LossKind] = None,
                            n_types: int = 2, seed: int = 0, n_initial: int = 8,
                            length_scale: float = 0.3, noise: float = 1e-6, max_workers: int = 1,
                            epsilon: float = DEFAULT_EPSILON,
                            monitor: Optional[PerformanceMonitor] = None) -> SearchReport:
    """
    深さごとにベイズ最適化を行い、深さ別の最良構成表を返す

    目的関数は検証データの MSE。総予算 budget を深さ層に配分し
    (split_budget)、試行ログの長さは budget 以下になる。

    Args:
        kind: アーキテクチャ種別
        train_batch: 学習バッチ
        test: 検証データセット
        space: 探索空間 (省略時は種別の既定)
        budget: 全深さ合計の評価回数 (2 以上かつ深さの数以上)
        base_config: 学習設定 (シードは試行ごとに置き換え)
        loss: 損失関数 (省略時は種別の既定)
        n_types: 種別数
        seed: 探索シード

    Returns:
        SearchReport
    """
    space = space or SearchSpace.for_kind(kind)
    loss = loss or default_loss(kind)
    depths = list(space.depths)
    if budget < max(2, len(depths)):
        raise ValueError(f"予算 {budget} が不足しています (2 以上かつ深さの数 {len(depths)} 以上)")

    def objective(config: NeuronConfig, trial_seed: int):
        spec = ArchitectureSpec(kind, len(config), config, n_types)
        result = train(build_model(spec, trial_seed), train_batch, replace(base_config, seed=trial_seed), loss)
        return metrics(predict_batch(result.model, test), test.target, epsilon)

    rows: List[DepthRow] = []
    all_trials: List[TrialResult] = []
    for depth, depth_budget in zip(depths, split_budget(budget, len(depths))):
        logger.info(f"深さ {depth} の探索を開始 ({kind}, 予算 {depth_budget}/{budget})")
        depth_seed = _trial_seed(seed, 10_000 + depth)
        result = _search_stratum(space.with_depth(depth), objective, depth_budget, depth_seed,
                                 n_initial, length_scale, noise, max_workers, monitor)
        offset = len(all_trials)
        for trial in result.trials:
            all_trials.append(replace(trial, index=offset + trial.index))
        rows.append(DepthRow(depth, replace(result.best, index=offset + result.best.index), len(result.trials)))

    return SearchReport(kind, rows, all_trials)
