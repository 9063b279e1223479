"""
アーキテクチャ探索のテスト
試行数の下限、探索空間、ガウス過程、ベイズ最適化の収束と再現性、深さ別探索を確認
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

# プロジェクトのrootディレクトリをパスに追加
sys.path.append(str(Path(__file__).parent))

from src.ingest import build_dataset, split_train_test
from src.models import make_training_batch
from src.nas import (
    GaussianProcess, SearchSpace, bayes_search, min_trials_for_top_fraction, random_search,
    run_architecture_search, split_budget,
)
from src.nn_core import TrainConfig
from src.performance_monitor import PerformanceMonitor
from src.synth import SynthParams, generate


def _quadratic(config, seed):
    """深さ 3、ニューロン 9 で最小 0 をとる目的関数"""
    return (len(config) - 3) ** 2 + ((config[0] - 9) / 4.0) ** 2


def _uniform_space():
    return SearchSpace((1, 5), (1, 15), per_layer_neurons=False)


def test_min_trials_for_top_fraction():
    """上位 5% を 95% で引くには 59 回、99% では 90 回"""
    assert min_trials_for_top_fraction(0.5, 0.5) == 1
    assert min_trials_for_top_fraction(0.05, 0.95) == 59
    assert min_trials_for_top_fraction(0.05, 0.99) == 90
    assert min_trials_for_top_fraction(1.0, 0.9) == 1
    n = min_trials_for_top_fraction(0.1, 0.9)
    assert 1 - 0.9 ** n >= 0.9 > 1 - 0.9 ** (n - 1)
    with pytest.raises(ValueError):
        min_trials_for_top_fraction(0.0, 0.9)
    with pytest.raises(ValueError):
        min_trials_for_top_fraction(0.05, 1.0)


def test_search_space_enumeration():
    """構成数と列挙順、深さ固定、種別ごとの既定範囲"""
    space = _uniform_space()
    configs = space.enumerate()
    assert space.size == len(configs) == 75
    assert configs[0] == (1,)
    assert configs[15] == (1, 1)
    assert configs[-1] == (15,) * 5

    per_layer = SearchSpace((1, 3), (1, 15))
    assert per_layer.size == 15 + 15 ** 2 + 15 ** 3
    assert per_layer.enumerate()[15] == (1, 1)

    assert SearchSpace.for_kind("vanilla").layers_range == (1, 5)
    assert SearchSpace.for_kind("hdgtwnn_lst").layers_range == (1, 3)
    assert space.with_depth(2).depths == [2]
    with pytest.raises(ValueError):
        space.with_depth(6)
    with pytest.raises(ValueError):
        SearchSpace((0, 2), (1, 15))


def test_search_space_encoding():
    """符号化は [0, 1] に収まり、無い層は 0"""
    space = SearchSpace((1, 3), (1, 15))
    encoded = space.encode([(1,), (15, 8, 1)])
    assert encoded.shape == (2, 4)
    assert encoded[0].tolist() == [0.0, 0.0, 0.0, 0.0]
    assert encoded[1].tolist() == [1.0, 1.0, 0.5, 0.0]


def test_gaussian_process_interpolates():
    """ノイズが小さい GP は学習点を再現し、学習点で不確かさが小さい"""
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(12, 2))
    y = np.sin(3 * x[:, 0]) + x[:, 1] ** 2
    gp = GaussianProcess(length_scale=0.3, noise=1e-8).fit(x, y)
    mean, sd = gp.predict(x)
    assert np.max(np.abs(mean - gp.y_std)) < 1e-3
    assert np.all(sd < 0.05)

    far_mean, far_sd = gp.predict(np.array([[5.0, 5.0]]))
    assert far_sd[0] > 0.99
    assert np.all(gp.expected_improvement(x) >= 0.0)
    with pytest.raises(ValueError):
        GaussianProcess(length_scale=0.0)


def test_bayes_finds_quadratic_optimum():
    """75 構成の空間で予算 50 なら 20 シード中 19 以上で最適構成を発見"""
    found = 0
    for seed in range(20):
        result = bayes_search(_uniform_space(), _quadratic, budget=50, seed=seed)
        found += result.best.config == (9, 9, 9)
    assert found >= 19


def test_bayes_beats_random_search():
    """予算 15 での最良値のシード平均は無作為探索以下"""
    bayes_best, random_best = [], []
    for seed in range(20):
        bayes_best.append(bayes_search(_uniform_space(), _quadratic, budget=15, seed=seed).best.objective)
        random_best.append(random_search(_uniform_space(), _quadratic, budget=15, seed=seed).best.objective)
    assert np.mean(bayes_best) <= np.mean(random_best)


def test_constant_objective_uses_full_budget():
    """目的関数が一定でも予算どおりの試行を重複なく行う"""
    result = bayes_search(_uniform_space(), lambda config, seed: 1.0, budget=20, seed=3)
    assert len(result.trials) == 20
    assert len({t.config for t in result.trials}) == 20
    assert [t.index for t in result.trials] == list(range(20))
    assert result.best.index == 0


def test_budget_below_two_rejected():
    """予算 1 以下の探索は受け付けない"""
    for budget in (0, 1):
        with pytest.raises(ValueError):
            bayes_search(_uniform_space(), _quadratic, budget=budget)


def test_split_budget_across_depths():
    """総予算は深さ層に配分され、余りは先頭の層から"""
    assert split_budget(5, 3) == [2, 2, 1]
    assert split_budget(50, 3) == [17, 17, 16]
    assert split_budget(50, 5) == [10] * 5
    assert sum(split_budget(7, 4)) == 7
    with pytest.raises(ValueError):
        split_budget(5, 0)


def test_budget_exceeding_space_is_exhaustive():
    """予算が構成数以上なら全構成を列挙順に評価"""
    space = SearchSpace((1, 2), (1, 3), per_layer_neurons=False)
    result = bayes_search(space, _quadratic, budget=10, seed=0)
    assert [t.config for t in result.trials] == space.enumerate()
    assert len(result.trials) == 6


def test_bayes_search_is_deterministic_and_parallel_safe():
    """同じシードなら同じ試行列、初期構成の並列評価でも結果は同じ"""
    serial = bayes_search(_uniform_space(), _quadratic, budget=20, seed=7)
    again = bayes_search(_uniform_space(), _quadratic, budget=20, seed=7)
    parallel = bayes_search(_uniform_space(), _quadratic, budget=20, seed=7, max_workers=4)
    configs = [t.config for t in serial.trials]
    assert configs == [t.config for t in again.trials]
    assert configs == [t.config for t in parallel.trials]
    assert [t.seed for t in serial.trials] == [t.seed for t in parallel.trials]
    assert len(set(configs)) == 20


def test_objective_outcome_forms():
    """目的関数は数値、(MSE, MAPE, R2) のどちらを返してもよい"""
    space = SearchSpace((1, 1), (1, 2), per_layer_neurons=False)
    result = bayes_search(space, lambda config, seed: (float(config[0]), 0.5, 0.25), budget=5)
    assert result.best.objective == 1.0
    assert result.best.mape == 0.5
    assert result.best.r2 == 0.25

    plain = bayes_search(space, lambda config, seed: float(config[0]), budget=5)
    assert np.isnan(plain.best.mape)


def test_run_architecture_search_depth_table():
    """深さごとに 1 行の表、試行ログは総予算の行数、同じシードなら同じ表"""
    grid = generate(SynthParams(rows=5, cols=5, t_steps=16, temporal_coeffs=(0.5,), seed=1))
    train_set, test_set = split_train_test(build_dataset(grid), seed=0)
    batch = make_training_batch(grid, train_set, "vanilla")
    space = SearchSpace((1, 3), (1, 4), per_layer_neurons=False)
    config = TrainConfig(epochs=1, batch_size=10)
    monitor = PerformanceMonitor()

    report = run_architecture_search("vanilla", batch, test_set, space=space, budget=5,
                                     base_config=config, seed=5, monitor=monitor)
    assert [row.depth for row in report.rows] == [1, 2, 3]
    assert len(report.trials) == 5
    assert [t.index for t in report.trials] == list(range(5))
    assert [row.n_trials for row in report.rows] == [2, 2, 1]
    assert len({t.config for t in report.trials}) == 5
    assert report.best.objective == min(t.objective for t in report.trials)
    assert len(report.trial_log_csv().strip().splitlines()) == 6
    assert len(monitor.step_stats["nas_trial"]) == 5

    table = report.depth_table_csv()
    assert table.splitlines()[0] == "depth,neurons,mse,mape,r2,n_trials"
    again = run_architecture_search("vanilla", batch, test_set, space=space, budget=5,
                                    base_config=replace(config), seed=5)
    assert again.depth_table_csv() == table

    # 深さの数より少ない予算では試行のない深さが出る
    with pytest.raises(ValueError):
        run_architecture_search("vanilla", batch, test_set, space=space, budget=2, base_config=config)


if __name__ == "__main__":
    print("🚀 アーキテクチャ探索テスト開始")
    print("=" * 60)

    tests = [fn for name, fn in list(globals().items()) if name.startswith("test_") and callable(fn)]
    failed = 0
    for test in tests:
        try:
            test()
            print(f"✅ {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"❌ {test.__name__}: {e}")

    print("=" * 60)
    print(f"📋 結果: {len(tests) - failed}/{len(tests)} 成功")
    sys.exit(1 if failed else 0)
