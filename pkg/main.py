"""
時空間加重ニューラルネットワーク コマンドラインツール
犯罪カウントグリッドの取り込み・相関診断・学習・構成探索・評価・合成データ生成
"""

import argparse
import json
import os
import sys
from typing import Optional, Sequence, Tuple

import numpy as np

from src.config_manager import ConfigManager
from src.container import atomic_write_text
from src.diagnostics import augment_grid, run_diagnostics
from src.evaluation import (
    EvalReport, dataset_map, diff_map, metrics, predicted_time_averaged_map,
    rescale_to_max, write_pgm, write_ppm_diverging,
)
from src.ingest import (
    Dataset, RecordSchema, SpatioTemporalGrid, build_dataset, build_grid_from_frame,
    format_matrix_csv, load_grid, parse_records_frame, save_grid, split_train_test,
)
from src.logger import PipelineLogger
from src.models import (
    ARCHITECTURES, ArchitectureSpec, SpatioTemporalNetwork, build_model, concat_batches,
    default_loss, load_checkpoint, make_training_batch, predict_batch,
    save_checkpoint,
)
from src.nas import SearchSpace, run_architecture_search
from src.nn_core import LossKind, TrainConfig, TrainingBatch, train
from src.performance_monitor import PerformanceMonitor
from src.synth import SynthParams, generate


class Pipeline:
    """各コマンドの実行を担うクラス"""

    def __init__(self, config: ConfigManager, verbose: bool = False, command: str = ""):
        """初期化"""
        self.config = config

        system_config = config.get_system_config()
        self.logger = PipelineLogger(
            log_level=system_config.get("log_level", "INFO"),
            log_file=system_config.get("log_file"),
            session_log_dir=system_config.get("session_log_dir"),
            command=command,
        )
        self.monitor = PerformanceMonitor(verbose=verbose)
        self.output_dir = config.get("paths.output_dir", "output")

    def _out(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def _write_text(self, name: str, text: str) -> str:
        path = self._out(name)
        atomic_write_text(path, text)
        return path

    def _write_map(self, stem: str, matrix: np.ndarray, signed: bool = False):
        self._write_text(f"{stem}.csv", format_matrix_csv(matrix, "%.10g"))
        if signed:
            write_ppm_diverging(self._out(f"{stem}.ppm"), matrix)
        else:
            write_pgm(self._out(f"{stem}.pgm"), matrix)

    # ---- 共通処理 ----

    def _load_grid(self, grid_path: Optional[str]) -> SpatioTemporalGrid:
        if not grid_path:
            raise ValueError("--grid でグリッドファイルを指定してください")
        return load_grid(grid_path)

    def _split(self, grid: SpatioTemporalGrid) -> Tuple[Dataset, Dataset]:
        dataset = build_dataset(grid, active_cells_only=bool(self.config.get("ingest.active_cells_only")))
        return split_train_test(dataset, self.config.derive_seed("split"))

    def _architecture(self, n_types: int) -> ArchitectureSpec:
        model_config = self.config.get_model_config()
        kind = model_config["architecture"]
        hidden_layers = int(model_config["hidden_layers"])
        neurons = [int(n) for n in model_config["neurons"]]
        if len(neurons) == 1 and hidden_layers > 1:
            neurons = neurons * hidden_layers
        return ArchitectureSpec(kind, hidden_layers, tuple(neurons), n_types)

    def _loss(self, kind: str, grid: SpatioTemporalGrid) -> LossKind:
        loss_config = self.config.get_loss_config()
        bandwidth_h = loss_config.get("bandwidth_h")
        if bandwidth_h is None:
            bandwidth_h = grid.spec.cell_size[0]
        return default_loss(kind, float(bandwidth_h), float(loss_config.get("bandwidth_ht", 1.0)))

    def _train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config.get_train_config(), self.config.derive_seed("shuffle"))

    def _training_batch(self, grid: SpatioTemporalGrid, train_set: Dataset, kind: str,
                        augment: bool) -> TrainingBatch:
        if not augment:
            return make_training_batch(grid, train_set, kind)

        # 検証期間の標本は各変換グリッドからも除外する
        cutoff = int(train_set.t.max()) + 1
        active_only = bool(self.config.get("ingest.active_cells_only"))
        batches = []
        for transformed in augment_grid(grid).values():
            dataset = build_dataset(transformed, active_cells_only=active_only)
            dataset = dataset.subset(np.flatnonzero(dataset.t < cutoff))
            batches.append(make_training_batch(transformed, dataset, kind))
        print(f"🔄 D4 拡張: {len(train_set)} -> {sum(len(b) for b in batches)} サンプル")
        return concat_batches(batches)

    def _evaluate(self, model: SpatioTemporalNetwork, dataset: Dataset) -> EvalReport:
        epsilon = float(self.config.get("eval.epsilon", 1e-7))
        return metrics(predict_batch(model, dataset), dataset.target, epsilon)

    # ---- コマンド ----

    def ingest(self, input_path: Optional[str]) -> str:
        """生データ CSV からグリッドを作成"""
        if not input_path:
            raise ValueError("--input で入力ファイルを指定してください")
        ingest_config = self.config.get_ingest_config()

        with self.monitor.step("ingest"):
            frame, dropped = parse_records_frame(input_path, RecordSchema.from_config(ingest_config))
            grid = build_grid_from_frame(frame, int(ingest_config["seed_n"]), ingest_config["crs"],
                                         ingest_config["resolution"])

        out_of_extent = int(grid.ingest_stats.get("out_of_extent", 0))
        kept = int(len(frame)) - out_of_extent
        self.logger.log_ingest_summary(kept, dropped, out_of_extent, grid.counts.shape)

        spec = grid.spec
        summary = {
            "records_kept": kept,
            "records_dropped": int(dropped),
            "records_out_of_extent": out_of_extent,
            "rows": spec.rows,
            "cols": spec.cols,
            "t_steps": spec.t_steps,
            "t_resolution": spec.t_resolution,
            "t_start": spec.t_start,
            "cell_size_km": list(spec.cell_size),
            "origin_km": list(spec.origin),
            "crs": spec.crs,
            "types": grid.type_names,
        }
        grid_path = self._out("grid.gtwc")
        save_grid(grid, grid_path)
        self._write_text("ingest_summary.json", json.dumps(summary, ensure_ascii=False, indent=2, sort_keys=True) + "\n")

        print(f"🗺️ グリッド: {spec.rows}x{spec.cols} セル "
              f"({spec.cell_size[0]:.3f} x {spec.cell_size[1]:.3f} km), {spec.t_steps} ステップ")
        print(f"📄 採用 {summary['records_kept']} 件 / 破棄 {dropped} 件 / 範囲外 {out_of_extent} 件")
        return grid_path

    def diagnose(self, grid_path: Optional[str], write_files: bool = True) -> str:
        """時間・空間相関診断と推奨アーキテクチャ"""
        grid = self._load_grid(grid_path)
        diag_config = self.config.get_diagnostics_config()

        with self.monitor.step("diagnose"):
            report = run_diagnostics(
                grid,
                max_lag=int(diag_config["max_lag"]),
                alpha=float(diag_config["alpha"]),
                window=int(diag_config["window"]),
                sample_frac=float(diag_config["sample_frac"]),
                threshold=float(diag_config["threshold"]),
                top_k=int(diag_config["top_slices"]),
                seed=self.config.derive_seed("isotropy"),
            )

        prescription = report.prescription
        self.logger.log_diagnostics(prescription.architecture, prescription.temporal_significant,
                                    prescription.spatial_significant)

        if write_files:
            self._write_text("temporal_acf.csv", report.temporal_acf.to_csv())
            self._write_text("temporal_pacf.csv", report.temporal_pacf.to_csv())
            for name, curve in report.spatial.items():
                self._write_text(f"spatial_pacf_{name}.csv", curve.to_csv())
            if report.isotropy is not None:
                lines = ["transform,deviation"]
                lines += [f"{name},{dev:.10g}" for name, dev in report.isotropy.symmetry_deviations.items()]
                self._write_text("isotropy.csv", "\n".join(lines) + "\n")
            self._write_text("diagnostics_report.txt", report.to_text())

        print(f"🔍 推奨アーキテクチャ: {prescription.architecture}")
        for note in prescription.notes:
            print(f"   - {note}")
        return prescription.architecture

    def train(self, grid_path: Optional[str], augment: bool = False) -> EvalReport:
        """1 構成を学習してチェックポイントと評価を出力"""
        grid = self._load_grid(grid_path)
        train_set, test_set = self._split(grid)
        spec = self._architecture(grid.n_types)
        loss = self._loss(spec.kind, grid)
        config = self._train_config()

        batch = self._training_batch(grid, train_set, spec.kind, augment)
        model = build_model(spec, self.config.derive_seed("init"))
        print(f"🧠 学習開始: {spec.describe()} ({model.count_parameters()} パラメータ, "
              f"{len(batch)} サンプル, 損失 {loss.tag})")

        result = train(model, batch, config, loss, monitor=self.monitor,
                       epoch_callback=self.logger.log_epoch)
        report = self._evaluate(result.model, test_set)

        save_checkpoint(result.model, self._out("model.gtwc"), extra={
            "loss": {"tag": loss.tag, "bandwidth_h": loss.bandwidth_h, "bandwidth_ht": loss.bandwidth_ht},
            "train": {"epochs": config.epochs, "batch_size": config.batch_size, "alpha": config.alpha},
            "augmented": augment,
        })
        trace = ["epoch,loss"] + [f"{i},{value:.12g}" for i, value in enumerate(result.loss_trace, start=1)]
        self._write_text("loss_trace.csv", "\n".join(trace) + "\n")
        self._write_text("eval_test.csv", report.to_csv())
        self.logger.log_metrics("test", report.mse, report.mape, report.r2)

        print(f"✅ 学習完了: 損失 {result.initial_loss:.4f} -> {result.final_loss:.4f}")
        print(f"📊 検証 MSE {report.mse:.4f} / MAPE {report.mape:.4g} / R2 {report.r2:.4f}")
        return report

    def search(self, grid_path: Optional[str]) -> str:
        """深さ別のベイズ最適化による構成探索"""
        grid = self._load_grid(grid_path)
        train_set, test_set = self._split(grid)
        kind = self.config.get("model.architecture")
        nas_config = self.config.get_nas_config()
        space = SearchSpace.for_kind(kind, per_layer_neurons=bool(nas_config["per_layer_neurons"]))

        print(f"🔎 構成探索開始: {kind}, 深さ {space.depths}, 総予算 {nas_config['budget']}")
        report = run_architecture_search(
            kind,
            make_training_batch(grid, train_set, kind),
            test_set,
            space=space,
            budget=int(nas_config["budget"]),
            base_config=self._train_config(),
            loss=self._loss(kind, grid),
            n_types=grid.n_types,
            seed=self.config.derive_seed("nas"),
            n_initial=int(nas_config["n_initial"]),
            length_scale=float(nas_config["length_scale"]),
            noise=float(nas_config["noise"]),
            max_workers=int(nas_config["max_workers"]),
            epsilon=float(self.config.get("eval.epsilon", 1e-7)),
            monitor=self.monitor,
        )
        for trial in report.trials:
            self.logger.log_trial(trial.index, "-".join(str(n) for n in trial.config), trial.objective)

        self._write_text("trial_log.csv", report.trial_log_csv())
        self._write_text("depth_table.csv", report.depth_table_csv())

        best = report.best
        best_config = "-".join(str(n) for n in best.config)
        print(f"🏆 最良構成: {best_config} (MSE {best.objective:.4f}, R2 {best.r2:.4f})")
        return best_config

    def evaluate(self, grid_path: Optional[str], checkpoint_path: Optional[str]) -> EvalReport:
        """チェックポイントを評価し、実測・予測・差分マップを出力"""
        if not checkpoint_path:
            raise ValueError("--checkpoint でチェックポイントを指定してください")
        grid = self._load_grid(grid_path)
        model, _ = load_checkpoint(checkpoint_path)
        if model.spec.n_types != grid.n_types:
            raise ValueError(f"チェックポイントの種別数 {model.spec.n_types} と"
                             f"グリッドの種別数 {grid.n_types} が一致しません")

        train_set, test_set = self._split(grid)
        report = self._evaluate(model, test_set)
        self._write_text("eval_report.csv", report.to_csv())
        self.logger.log_metrics("evaluate", report.mse, report.mape, report.r2)

        shape = (grid.spec.rows, grid.spec.cols)
        actual = dataset_map(test_set.target, test_set, shape)
        predicted = predicted_time_averaged_map(model, test_set, shape)
        self._write_map("map_actual", actual)
        self._write_map("map_predicted", predicted)
        self._write_map("map_diff", diff_map(actual, predicted), signed=True)

        # 学習期間の平均分布を検証期間の最大値に合わせてから比較
        train_actual = dataset_map(train_set.target, train_set, shape)
        if np.max(train_actual) > 0:
            rescaled = rescale_to_max(train_actual, actual)
            self._write_map("map_train_rescaled", rescaled)
            self._write_map("map_train_test_diff", diff_map(actual, rescaled), signed=True)
        else:
            print("⚠️ 学習期間のカウントがすべて 0 のため学習・検証比較を省略します")

        print(f"📊 評価: MSE {report.mse:.4f} / MAPE {report.mape:.4g} / "
              f"R2 {report.r2:.4f}{'' if report.r2_defined else ' (未定義)'}")
        return report

    def synth(self) -> str:
        """合成グリッドを生成"""
        synth_config = self.config.get_synth_config()
        params = SynthParams(
            rows=int(synth_config["rows"]),
            cols=int(synth_config["cols"]),
            t_steps=int(synth_config["t_steps"]),
            temporal_coeffs=tuple(synth_config["temporal_coeffs"]),
            spatial_kernel_radius=float(synth_config["spatial_kernel_radius"]),
            base_rate=float(synth_config["base_rate"]),
            seed=self.config.derive_seed("synth"),
            kernel_anisotropy=float(synth_config["kernel_anisotropy"]),
        )
        grid = generate(params)
        grid_path = self._out("grid.gtwc")
        save_grid(grid, grid_path)
        print(f"🎲 合成グリッド: {params.t_steps}x{params.rows}x{params.cols}, "
              f"AR{list(params.temporal_coeffs)}, 平滑化半径 {params.spatial_kernel_radius}")
        return grid_path


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", default=None, help="設定ファイル (JSON)")
    parser.add_argument("--output-dir", default=None, help="出力ディレクトリ")
    parser.add_argument("--seed", type=int, default=None, help="マスターシード")
    parser.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--log-file", default=None)
    parser.add_argument("--session-log-dir", default=None, help="コマンドごとのセッションログの出力先")
    parser.add_argument("--verbose", action="store_true", help="ステップ時間を表示")


def _add_grid(parser: argparse.ArgumentParser):
    parser.add_argument("--grid", required=True, help="グリッドファイル")
    parser.add_argument("--active-cells-only", action="store_true", default=None,
                        help="期間中にカウントのないセルを除外")


def _add_model(parser: argparse.ArgumentParser):
    parser.add_argument("--architecture", choices=ARCHITECTURES, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--learning-rate", type=float, default=None, help="ADAM の学習率")
    parser.add_argument("--bandwidth-h", type=float, default=None, help="空間カーネル幅 (km)")
    parser.add_argument("--bandwidth-ht", type=float, default=None, help="時間カーネル幅 (ステップ)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="時空間加重ニューラルネットワークによる犯罪カウント予測")
    subparsers = parser.add_subparsers(dest="command", required=True)

    ingest = subparsers.add_parser("ingest", help="生データからグリッドを作成")
    _add_common(ingest)
    ingest.add_argument("--input", default=None, help="入力 CSV")
    ingest.add_argument("--crs", choices=["BNG", "UTM17N"], default=None)
    ingest.add_argument("--seed-n", type=int, default=None, help="グリッド寸法の基準セル数")
    ingest.add_argument("--resolution", choices=["monthly", "daily"], default=None)
    ingest.add_argument("--delimiter", default=None)

    for name, help_text in (("diagnose", "相関診断 (CSV とレポートを出力)"),
                            ("prescribe", "推奨アーキテクチャのみ表示")):
        sub = subparsers.add_parser(name, help=help_text)
        _add_common(sub)
        _add_grid(sub)
        sub.add_argument("--max-lag", type=int, default=None)
        sub.add_argument("--alpha", type=float, default=None, help="有意水準")
        sub.add_argument("--window", type=int, default=None)
        sub.add_argument("--threshold", type=float, default=None, help="等方性の許容偏差")
        sub.add_argument("--top-slices", type=int, default=None)

    train_parser = subparsers.add_parser("train", help="1 構成を学習")
    _add_common(train_parser)
    _add_grid(train_parser)
    _add_model(train_parser)
    train_parser.add_argument("--hidden-layers", type=int, default=None)
    train_parser.add_argument("--neurons", type=int, nargs="+", default=None)
    train_parser.add_argument("--augment", action="store_true", help="D4 変換で学習データを 8 倍に拡張")

    search = subparsers.add_parser("search", help="ベイズ最適化による構成探索")
    _add_common(search)
    _add_grid(search)
    _add_model(search)
    search.add_argument("--budget", type=int, default=None, help="全深さ合計の試行回数")
    search.add_argument("--n-initial", type=int, default=None)
    search.add_argument("--max-workers", type=int, default=None)

    evaluate = subparsers.add_parser("evaluate", help="チェックポイントを評価")
    _add_common(evaluate)
    _add_grid(evaluate)
    evaluate.add_argument("--checkpoint", required=True)

    synth = subparsers.add_parser("synth", help="合成グリッドを生成")
    _add_common(synth)
    synth.add_argument("--rows", type=int, default=None)
    synth.add_argument("--cols", type=int, default=None)
    synth.add_argument("--t-steps", type=int, default=None)
    synth.add_argument("--coeffs", type=float, nargs="*", default=None, help="AR 係数 (0..2 個)")
    synth.add_argument("--radius", type=float, default=None, help="空間平滑化半径 (セル)")
    synth.add_argument("--base-rate", type=float, default=None)
    synth.add_argument("--anisotropy", type=float, default=None)

    return parser


# 引数名 -> 設定キー
OVERRIDE_KEYS = {
    "output_dir": "paths.output_dir",
    "input": "paths.input",
    "seed": "seeds.master",
    "log_level": "system.log_level",
    "log_file": "system.log_file",
    "session_log_dir": "system.session_log_dir",
    "crs": "ingest.crs",
    "seed_n": "ingest.seed_n",
    "resolution": "ingest.resolution",
    "delimiter": "ingest.delimiter",
    "active_cells_only": "ingest.active_cells_only",
    "max_lag": "diagnostics.max_lag",
    "alpha": "diagnostics.alpha",
    "window": "diagnostics.window",
    "threshold": "diagnostics.threshold",
    "top_slices": "diagnostics.top_slices",
    "architecture": "model.architecture",
    "hidden_layers": "model.hidden_layers",
    "neurons": "model.neurons",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "learning_rate": "train.alpha",
    "bandwidth_h": "loss.bandwidth_h",
    "bandwidth_ht": "loss.bandwidth_ht",
    "budget": "nas.budget",
    "n_initial": "nas.n_initial",
    "max_workers": "nas.max_workers",
    "rows": "synth.rows",
    "cols": "synth.cols",
    "t_steps": "synth.t_steps",
    "coeffs": "synth.temporal_coeffs",
    "radius": "synth.spatial_kernel_radius",
    "base_rate": "synth.base_rate",
    "anisotropy": "synth.kernel_anisotropy",
}


def load_config(args: argparse.Namespace) -> ConfigManager:
    """設定ファイルを読み、コマンドライン引数で上書き"""
    config = ConfigManager(args.config)
    values = vars(args)
    config.apply_overrides({key: values[arg] for arg, key in OVERRIDE_KEYS.items() if arg in values})
    return config


def run_command(args: argparse.Namespace) -> int:
    """コマンドを実行して終了コードを返す"""
    config = load_config(args)
    pipeline = Pipeline(config, verbose=args.verbose, command=args.command)
    pipeline.logger.log_startup(args.command)
    pipeline.logger.log_config(config.to_dict())
    pipeline.monitor.start_session(args.command)

    try:
        if args.command == "ingest":
            pipeline.ingest(config.get("paths.input"))
        elif args.command == "diagnose":
            pipeline.diagnose(args.grid)
        elif args.command == "prescribe":
            pipeline.diagnose(args.grid, write_files=False)
        elif args.command == "train":
            pipeline.train(args.grid, augment=args.augment)
        elif args.command == "search":
            pipeline.search(args.grid)
        elif args.command == "evaluate":
            pipeline.evaluate(args.grid, args.checkpoint)
        elif args.command == "synth":
            pipeline.synth()
    except Exception as e:
        pipeline.monitor.finish_session(success=False)
        pipeline.logger.log_error(f"{args.command} に失敗しました", e)
        pipeline.logger.log_shutdown(args.command, success=False)
        print(f"❌ エラー: {e}")
        return 1

    pipeline.monitor.finish_session(success=True)
    if args.verbose:
        pipeline.monitor.print_performance_report()
        pipeline._write_text("step_timings.csv", pipeline.monitor.step_timings_csv())
    pipeline.logger.log_shutdown(args.command)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """メイン関数"""
    args = build_parser().parse_args(argv)
    return run_command(args)


if __name__ == "__main__":
    sys.exit(main())
