"""
設定管理・ログ・パフォーマンス監視・コンテナ形式のテスト
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

# プロジェクトのrootディレクトリをパスに追加
sys.path.append(str(Path(__file__).parent))

from src.config_manager import DEFAULT_CONFIG, ConfigManager
from src.container import read_container, write_container
from src.logger import PipelineLogger, setup_logging
from src.performance_monitor import PerformanceMonitor


def test_defaults_without_file():
    """設定ファイルがなければデフォルト値"""
    config = ConfigManager(None)
    assert config.get("train.epochs") == 6
    assert config.get("train.batch_size") == 10
    assert config.get("eval.epsilon") == 1e-7
    assert config.get("model.architecture") == "gtwnn"
    assert config.get("nas.budget") == 50
    assert config.get("system.session_log_dir") is None
    assert config.get("missing.key", "x") == "x"
    # デフォルト辞書は共有されない
    config.set("train.epochs", 99)
    assert DEFAULT_CONFIG["train"]["epochs"] == 6


def test_missing_or_broken_file_falls_back(tmp_path):
    """存在しない・壊れた設定ファイルはデフォルトで続行"""
    assert ConfigManager(str(tmp_path / "none.json")).get("train.epochs") == 6
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    assert ConfigManager(str(broken)).get("train.epochs") == 6


def test_file_merges_with_defaults(tmp_path):
    """部分的な設定ファイルはデフォルトにマージ"""
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"train": {"epochs": 3}, "seeds": {"master": 11}}), encoding="utf-8")
    config = ConfigManager(str(path))
    assert config.get("train.epochs") == 3
    assert config.get("train.batch_size") == 10
    assert config.get("seeds.master") == 11


def test_apply_overrides_skips_none():
    """None の上書きは無視"""
    config = ConfigManager.from_dict({"train": {"epochs": 4}})
    config.apply_overrides({"train.epochs": None, "train.batch_size": 32, "synth.temporal_coeffs": []})
    assert config.get("train.epochs") == 4
    assert config.get("train.batch_size") == 32
    assert config.get("synth.temporal_coeffs") == []


def test_set_creates_nested_keys():
    config = ConfigManager(None)
    config.set("extra.deep.value", 5)
    assert config.get("extra.deep.value") == 5


def test_derive_seed():
    """サブシードは名前ごとに異なり、マスターシードで決まる"""
    config = ConfigManager.from_dict({"seeds": {"master": 0}})
    names = ["split", "init", "shuffle", "nas", "synth", "isotropy"]
    seeds = [config.derive_seed(name) for name in names]
    assert len(set(seeds)) == len(names)
    assert all(0 <= seed < 2 ** 32 for seed in seeds)
    assert seeds == [ConfigManager.from_dict({"seeds": {"master": 0}}).derive_seed(n) for n in names]
    assert config.derive_seed("split") != ConfigManager.from_dict({"seeds": {"master": 1}}).derive_seed("split")


def test_save_and_reload(tmp_path):
    """保存した設定を読み直すと同じ内容、既存ファイルはバックアップ"""
    path = tmp_path / "saved.json"
    config = ConfigManager.from_dict({"train": {"alpha": 0.01}})
    assert config.save_config(str(path))
    assert ConfigManager(str(path)).to_dict() == config.to_dict()

    config.set("train.alpha", 0.02)
    assert config.save_config(str(path))
    assert (tmp_path / "saved.json.backup").exists()
    assert ConfigManager(str(path)).get("train.alpha") == 0.02

    with pytest.raises(ValueError):
        ConfigManager(None).save_config()


def test_pipeline_logger_writes_file(tmp_path):
    """ログファイルに各イベントが記録される"""
    log_file = tmp_path / "logs" / "run.log"
    pipeline_logger = PipelineLogger(log_level="INFO", log_file=str(log_file))
    try:
        pipeline_logger.log_startup("train")
        pipeline_logger.log_epoch(1, 0.25)
        pipeline_logger.log_trial(0, "8-4", 1.5)
        pipeline_logger.log_diagnostics("gtwnn_ls", False, True)
        pipeline_logger.log_metrics("test", 0.5, 2.0, float("nan"))
        pipeline_logger.log_config({"train": {"epochs": 6}})
        pipeline_logger.log_error("失敗", ValueError("原因"))
        pipeline_logger.log_shutdown("train", success=False)
        for handler in pipeline_logger.main_logger.handlers:
            handler.flush()

        text = log_file.read_text(encoding="utf-8")
        assert "コマンド開始: train" in text
        assert "エポック 1: 損失 0.250000" in text
        assert "試行 0: 8-4 -> MSE 1.500000" in text
        assert "推奨 gtwnn_ls" in text
        assert "評価 test: MSE 0.5, MAPE 2, R2 nan" in text
        # 設定は DEBUG なので INFO では出力されない
        assert "設定 train" not in text
        assert "エラー: 失敗 - 原因" in text
        assert "ERROR" in text
    finally:
        setup_logging("INFO", console_output=False)


def test_log_level_filters(tmp_path):
    """WARNING レベルでは INFO のイベントは記録されない"""
    log_file = tmp_path / "warn.log"
    pipeline_logger = PipelineLogger(log_level="WARNING", log_file=str(log_file))
    try:
        pipeline_logger.log_epoch(1, 0.5)
        pipeline_logger.log_error("異常")
        for handler in pipeline_logger.main_logger.handlers:
            handler.flush()
        text = log_file.read_text(encoding="utf-8")
        assert "エポック" not in text
        assert "エラー: 異常" in text
    finally:
        setup_logging("INFO", console_output=False)


def test_session_log_written_per_command(tmp_path):
    """セッションログの出力先を指定するとコマンド名付きのファイルに記録される"""
    session_dir = tmp_path / "sessions"
    pipeline_logger = PipelineLogger(log_level="INFO", session_log_dir=str(session_dir), command="train")
    try:
        pipeline_logger.log_startup("train")
        pipeline_logger.log_epoch(2, 0.125)
        pipeline_logger.log_shutdown("train")

        files = list(session_dir.glob("session_*_train.log"))
        assert len(files) == 1
        text = files[0].read_text(encoding="utf-8")
        assert "コマンド開始: train" in text
        assert "エポック 2: 損失 0.125000" in text
        assert "コマンド正常終了: train" in text
        assert PipelineLogger(log_level="INFO").session_logger is None
    finally:
        setup_logging("INFO", console_output=False, logger_name="src.session")
        setup_logging("INFO", console_output=False)


def test_performance_monitor_steps():
    """ステップ計測と外部計測の記録"""
    monitor = PerformanceMonitor()
    assert "message" in monitor.get_performance_stats()

    monitor.start_session("test")
    monitor.start_step("train")
    duration = monitor.finish_step("train")
    assert duration is not None and duration >= 0.0
    assert monitor.finish_step("unknown") is None

    monitor.record_step("nas_trial", 0.5)
    monitor.record_step("nas_trial", 1.5)
    monitor.finish_session(success=True)

    stats = monitor.get_performance_stats()
    assert stats["total_sessions"] == 1
    assert stats["successful_sessions"] == 1
    assert stats["step_statistics"]["nas_trial"]["count"] == 2
    assert stats["step_statistics"]["nas_trial"]["average_time"] == 1.0

    assert stats["commands"] == ["test"]

    csv = monitor.step_timings_csv().splitlines()
    assert csv[0] == "step,count,total_s,mean_s,p90_s,max_s"
    assert csv[1].startswith("nas_trial,2,2.000000,1.000000,")

    monitor.reset_stats()
    assert not monitor.step_stats


def test_performance_monitor_step_context():
    """with 文のステップは例外時に失敗として記録され、例外は再送出"""
    monitor = PerformanceMonitor()
    with monitor.step("diagnose"):
        pass
    with pytest.raises(ValueError):
        with monitor.step("train"):
            raise ValueError("失敗")

    steps = monitor.current_session.steps
    assert steps["diagnose"].success
    assert not steps["train"].success
    assert steps["train"].error_message == "失敗"
    assert len(monitor.step_stats["train"]) == 1


def test_container_canonical_types(tmp_path):
    """整数は int64、実数は float64 で保存され、挿入順と meta が保たれる"""
    path = tmp_path / "data.gtwc"
    arrays = {"b": np.arange(6, dtype=np.int32).reshape(2, 3), "a": np.array([0.5, -1.0], dtype=np.float32)}
    write_container(str(path), {"kind": "test", "note": "日本語"}, arrays)
    meta, loaded = read_container(str(path))
    assert meta == {"kind": "test", "note": "日本語"}
    assert list(loaded) == ["b", "a"]
    assert loaded["b"].dtype == np.int64 and loaded["b"].tolist() == [[0, 1, 2], [3, 4, 5]]
    assert loaded["a"].dtype == np.float64 and loaded["a"].tolist() == [0.5, -1.0]


def test_container_rejects_bad_input(tmp_path):
    """マジック不一致、切り詰め、保存できない型はエラー"""
    bad = tmp_path / "bad.gtwc"
    bad.write_bytes(b"NOTAGTWC")
    with pytest.raises(ValueError):
        read_container(str(bad))

    good = tmp_path / "good.gtwc"
    write_container(str(good), {}, {"x": np.zeros(100)})
    truncated = tmp_path / "cut.gtwc"
    truncated.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ValueError):
        read_container(str(truncated))

    with pytest.raises(ValueError):
        write_container(str(tmp_path / "str.gtwc"), {}, {"s": np.array(["a"])})


if __name__ == "__main__":
    import inspect
    import tempfile

    print("🚀 設定・ログテスト開始")
    print("=" * 60)

    tests = [fn for name, fn in list(globals().items()) if name.startswith("test_") and callable(fn)]
    failed = 0
    for test in tests:
        try:
            if "tmp_path" in inspect.signature(test).parameters:
                test(Path(tempfile.mkdtemp()))
            else:
                test()
            print(f"✅ {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"❌ {test.__name__}: {e}")

    print("=" * 60)
    print(f"📋 結果: {len(tests) - failed}/{len(tests)} 成功")
    sys.exit(1 if failed else 0)
