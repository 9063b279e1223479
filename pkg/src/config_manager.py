"""
設定管理モジュール
実行設定(RunConfig)の JSON 読み書きとデフォルト値管理
"""

import copy
import hashlib
import json
import logging
import os
import shutil
from typing import Dict, Any, Optional, Mapping


logger = logging.getLogger(__name__)


DEFAULT_CONFIG: Dict[str, Any] = {
    "paths": {
        "input": None,
        "output_dir": "output",
    },
    "ingest": {
        "longitude_column": "Longitude",
        "latitude_column": "Latitude",
        "timestamp_column": "Month",
        "type_column": "Crime type",
        "delimiter": ",",
        "crs": "BNG",
        "seed_n": 32,
        "resolution": "monthly",
        "active_cells_only": False,
    },
    "model": {
        "architecture": "gtwnn",
        "hidden_layers": 1,
        "neurons": [8],
    },
    "train": {
        "epochs": 6,
        "batch_size": 10,
        "alpha": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
    },
    "loss": {
        # None はセル幅を使う
        "bandwidth_h": None,
        "bandwidth_ht": 1.0,
    },
    "nas": {
        "budget": 50,
        "n_initial": 8,
        "length_scale": 0.3,
        "noise": 1e-6,
        "max_workers": 1,
        "per_layer_neurons": True,
    },
    "diagnostics": {
        "max_lag": 10,
        "alpha": 0.05,
        "window": 7,
        "sample_frac": 0.25,
        "threshold": 0.15,
        "top_slices": 10,
    },
    "synth": {
        "rows": 12,
        "cols": 12,
        "t_steps": 36,
        "temporal_coeffs": [0.5, 0.3],
        "spatial_kernel_radius": 1.0,
        "base_rate": 10.0,
        "kernel_anisotropy": 1.0,
    },
    "eval": {
        "epsilon": 1e-7,
    },
    "seeds": {
        "master": 0,
    },
    "system": {
        "log_level": "INFO",
        "log_file": None,
        # 指定するとコマンドごとにタイムスタンプ付きのセッションログを出力
        "session_log_dir": None,
    },
}


def _deep_merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    """override を base に再帰的にマージした新しい辞書を返す"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ConfigManager:
    """設定管理クラス"""

    def __init__(self, config_path: Optional[str] = "config.json"):
        """
        初期化

        Args:
            config_path: 設定ファイルのパス (None ならデフォルトのみ)
        """
        self.config_path = config_path
        self._config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        """設定ファイルを読み込み、デフォルトとマージ"""
        if not self.config_path:
            return self._get_default_config()
        try:
            if os.path.exists(self.config_path):
                with open(self.config_path, 'r', encoding='utf-8') as f:
                    loaded = json.load(f)
                logger.info(f"設定ファイル読み込み完了: {self.config_path}")
                return _deep_merge(self._get_default_config(), loaded)
            else:
                logger.warning(f"設定ファイルが見つかりません: {self.config_path}")
                return self._get_default_config()
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"設定ファイル読み込みエラー: {e} (デフォルト設定を使用します)")
            return self._get_default_config()

    def _get_default_config(self) -> Dict[str, Any]:
        """デフォルト設定を取得"""
        return copy.deepcopy(DEFAULT_CONFIG)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ConfigManager":
        """辞書から設定を構築 (ファイルは読まない)"""
        manager = cls(config_path=None)
        manager._config = _deep_merge(manager._config, data)
        return manager

    def to_dict(self) -> Dict[str, Any]:
        """設定のディープコピーを返す"""
        return copy.deepcopy(self._config)

    def get(self, key_path: str, default: Any = None) -> Any:
        """
        設定値を取得（ドット記法対応）

        Args:
            key_path: 設定キーのパス（例: "train.epochs"）
            default: デフォルト値

        Returns:
            設定値
        """
        value: Any = self._config
        for key in key_path.split('.'):
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return default
        return value

    def set(self, key_path: str, value: Any):
        """
        設定値を変更

        Args:
            key_path: 設定キーのパス
            value: 新しい値
        """
        keys = key_path.split('.')
        config = self._config

        for key in keys[:-1]:
            if not isinstance(config.get(key), dict):
                config[key] = {}
            config = config[key]

        config[keys[-1]] = value

    def apply_overrides(self, overrides: Mapping[str, Any]):
        """
        コマンドライン引数などの上書きを適用 (None の値は無視)

        Args:
            overrides: ドット記法キー -> 値
        """
        for key_path, value in overrides.items():
            if value is not None:
                self.set(key_path, value)

    def save_config(self, path: Optional[str] = None) -> bool:
        """設定をファイルに保存"""
        target = path or self.config_path
        if not target:
            raise ValueError("保存先の設定ファイルパスがありません")

        backup_path = f"{target}.backup"
        try:
            if os.path.exists(target):
                shutil.copy2(target, backup_path)

            with open(target, 'w', encoding='utf-8') as f:
                json.dump(self._config, f, ensure_ascii=False, indent=2, sort_keys=True)

            logger.info(f"設定ファイル保存完了: {target}")
            return True

        except OSError as e:
            logger.error(f"設定ファイル保存エラー: {e}")
            if os.path.exists(backup_path):
                try:
                    shutil.copy2(backup_path, target)
                    logger.info("バックアップから設定を復元しました")
                except OSError as restore_error:
                    logger.error(f"バックアップ復元エラー: {restore_error}")
            return False

    def derive_seed(self, name: str) -> int:
        """
        マスターシードから名前付きサブシードを導出

        Args:
            name: 用途名 (shuffle, init, nas, synth, isotropy, split など)

        Returns:
            32ビットの非負整数シード
        """
        master = self.get("seeds.master", 0)
        digest = hashlib.sha256(f"{master}:{name}".encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "little")

    def get_ingest_config(self) -> Dict[str, Any]:
        """取り込み設定を取得"""
        return self.get("ingest", {})

    def get_model_config(self) -> Dict[str, Any]:
        """モデル設定を取得"""
        return self.get("model", {})

    def get_train_config(self) -> Dict[str, Any]:
        """学習設定を取得"""
        return self.get("train", {})

    def get_loss_config(self) -> Dict[str, Any]:
        """損失関数設定を取得"""
        return self.get("loss", {})

    def get_nas_config(self) -> Dict[str, Any]:
        """アーキテクチャ探索設定を取得"""
        return self.get("nas", {})

    def get_diagnostics_config(self) -> Dict[str, Any]:
        """診断設定を取得"""
        return self.get("diagnostics", {})

    def get_synth_config(self) -> Dict[str, Any]:
        """合成データ設定を取得"""
        return self.get("synth", {})

    def get_system_config(self) -> Dict[str, Any]:
        """システム設定を取得"""
        return self.get("system", {})
