"""
ログ管理モジュール
前処理・学習・探索パイプラインの動作ログを管理
"""

import json
import logging
import os
from datetime import datetime
from typing import Any, Mapping, Optional


PACKAGE_LOGGER = "src"

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logging(log_level: str = "INFO",
                  log_file: Optional[str] = None,
                  console_output: bool = True,
                  logger_name: str = PACKAGE_LOGGER) -> logging.Logger:
    """
    ログシステムを設定

    Args:
        log_level: ログレベル (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: ログファイルパス (Noneの場合はファイル出力なし)
        console_output: コンソール出力するか
        logger_name: 設定するロガー名 (既定はパッケージロガー)

    Returns:
        設定されたロガー
    """
    level = getattr(logging, log_level.upper(), logging.INFO)

    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    # src.* のモジュールロガーはここに伝播する
    logger = logging.getLogger(logger_name)
    logger.setLevel(level)

    # 既存のハンドラーをクリア
    for handler in list(logger.handlers):
        handler.close()
    logger.handlers.clear()

    if console_output:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(level)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)

        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def create_session_logger(base_path: str, command: str = "") -> logging.Logger:
    """
    コマンド実行ごとのセッションロガーを作成 (ファイル出力のみ)

    Args:
        base_path: セッションログの出力ディレクトリ
        command: ファイル名に含めるコマンド名

    Returns:
        セッション用ロガー。ファイルは base_path/session_<日時>[_<コマンド>].log
    """
    timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    suffix = f"_{command}" if command else ""
    log_file = os.path.join(base_path, f"session_{timestamp}{suffix}.log")

    return setup_logging(
        log_level="INFO",
        log_file=log_file,
        console_output=False,  # セッションログはファイルのみ
        logger_name=f"{PACKAGE_LOGGER}.session",
    )


class PipelineLogger:
    """パイプライン専用ログ管理クラス"""

    def __init__(self, log_level: str = "INFO",
                 log_file: Optional[str] = None,
                 session_log_dir: Optional[str] = None,
                 command: str = ""):
        """
        初期化

        Args:
            log_level: メインログレベル
            log_file: メインログのファイル出力先
            session_log_dir: セッションログの出力ディレクトリ (None なら無効)
            command: セッションログのファイル名に含めるコマンド名
        """
        self.main_logger = setup_logging(log_level, log_file=log_file)

        if session_log_dir:
            self.session_logger = create_session_logger(session_log_dir, command)
            # セッションロガーはメインへ伝播させない
            self.session_logger.propagate = False
        else:
            self.session_logger = None

    def _emit(self, level: int, msg: str):
        self.main_logger.log(level, msg)
        if self.session_logger:
            self.session_logger.log(level, msg)

    def log_startup(self, command: str):
        """起動ログ"""
        self._emit(logging.INFO, f"コマンド開始: {command}")

    def log_ingest_summary(self, kept: int, dropped: int, out_of_extent: int,
                           shape: tuple):
        """取り込み結果ログ"""
        self._emit(
            logging.INFO,
            f"取り込み完了: 採用 {kept} 件, 破棄 {dropped} 件, 範囲外 {out_of_extent} 件, "
            f"グリッド {shape}",
        )

    def log_epoch(self, epoch: int, loss: float):
        """エポック損失ログ"""
        self._emit(logging.INFO, f"エポック {epoch}: 損失 {loss:.6f}")

    def log_trial(self, index: int, config: str, objective: float):
        """探索試行ログ"""
        self._emit(logging.INFO, f"試行 {index}: {config} -> MSE {objective:.6f}")

    def log_diagnostics(self, architecture: str, temporal: bool, spatial: bool):
        """診断結果ログ"""
        self._emit(
            logging.INFO,
            f"診断結果: 時間相関={'有意' if temporal else '非有意'}, "
            f"空間相関={'有意' if spatial else '非有意'} -> 推奨 {architecture}",
        )

    def log_config(self, settings: Mapping[str, Any]):
        """実効設定をセクションごとに DEBUG で記録"""
        for section, values in settings.items():
            self._emit(logging.DEBUG, f"設定 {section}: {json.dumps(values, ensure_ascii=False, sort_keys=True)}")

    def log_metrics(self, label: str, mse: float, mape: float, r2: float):
        """評価指標ログ"""
        self._emit(logging.INFO, f"評価 {label}: MSE {mse:.6g}, MAPE {mape:.6g}, R2 {r2:.6g}")

    def log_error(self, error_msg: str, exception: Optional[BaseException] = None):
        """エラーログ"""
        msg = f"エラー: {error_msg}"
        if exception:
            msg += f" - {str(exception)}"
        self._emit(logging.ERROR, msg)

    def log_shutdown(self, command: str, success: bool = True):
        """終了ログ"""
        status = "正常終了" if success else "異常終了"
        self._emit(logging.INFO if success else logging.ERROR, f"コマンド{status}: {command}")
