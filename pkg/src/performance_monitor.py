"""
パフォーマンス監視モジュール
取り込み・診断・学習エポック・探索試行など各ステップの実行時間を計測
"""

import threading
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional

import numpy as np


@dataclass
class ProcessingStep:
    """処理ステップの実行時間記録"""
    name: str
    start_time: float
    duration: Optional[float] = None
    success: bool = True
    error_message: Optional[str] = None

    def finish(self, success: bool = True, error_message: Optional[str] = None) -> float:
        self.duration = time.perf_counter() - self.start_time
        self.success = success
        self.error_message = error_message
        return self.duration


@dataclass
class ProcessingSession:
    """1 回のコマンド実行の記録"""
    session_id: str
    command: str
    start_time: float
    steps: Dict[str, ProcessingStep] = field(default_factory=dict)
    total_duration: Optional[float] = None
    success: bool = True


class PerformanceMonitor:
    """コマンド単位のセッションとステップ時間を集計するクラス"""

    def __init__(self, verbose: bool = False):
        """
        初期化

        Args:
            verbose: ステップごとの進捗を標準出力に表示するか
        """
        self.verbose = verbose
        self.sessions: List[ProcessingSession] = []
        self.current_session: Optional[ProcessingSession] = None
        # ステップ名 -> 所要時間 (秒) の列。探索試行はワーカースレッドから追加される
        self.step_stats: Dict[str, List[float]] = defaultdict(list)
        self._lock = threading.Lock()

    def start_session(self, command: str = "") -> str:
        """コマンド実行のセッションを開始"""
        session_id = f"session_{len(self.sessions) + 1:04d}"
        self.current_session = ProcessingSession(session_id, command, time.perf_counter())
        if self.verbose:
            print(f"📊 セッション開始: {session_id} {command}")
        return session_id

    def start_step(self, step_name: str) -> ProcessingStep:
        """ステップを開始 (セッション未開始なら自動で開始)"""
        if self.current_session is None:
            self.start_session()
        step = ProcessingStep(step_name, time.perf_counter())
        self.current_session.steps[step_name] = step
        if self.verbose:
            print(f"⏱️ ステップ開始: {step_name}")
        return step

    def finish_step(self, step_name: str, success: bool = True,
                    error_message: Optional[str] = None) -> Optional[float]:
        """
        ステップを完了

        Returns:
            所要時間 (秒)。開始していないステップなら None
        """
        step = self.current_session.steps.get(step_name) if self.current_session else None
        if step is None or step.duration is not None:
            if self.verbose:
                print(f"⚠️ ステップ '{step_name}' が開始されていません")
            return None

        duration = step.finish(success, error_message)
        self.record_step(step_name, duration)
        if self.verbose:
            print(f"{'✅' if success else '❌'} ステップ完了: {step_name} ({duration * 1000:.1f}ms)")
            if error_message:
                print(f"   エラー: {error_message}")
        return duration

    @contextmanager
    def step(self, step_name: str) -> Iterator[ProcessingStep]:
        """with 文でステップを計測 (例外時は失敗として記録し再送出)"""
        handle = self.start_step(step_name)
        try:
            yield handle
        except Exception as e:
            self.finish_step(step_name, success=False, error_message=str(e))
            raise
        self.finish_step(step_name)

    def record_step(self, step_name: str, duration: float):
        """計測済みの所要時間を統計に追加"""
        with self._lock:
            self.step_stats[step_name].append(float(duration))

    def finish_session(self, success: bool = True):
        """現在のセッションを完了"""
        session = self.current_session
        if session is None:
            return
        session.total_duration = time.perf_counter() - session.start_time
        session.success = success
        self.sessions.append(session)
        self.current_session = None
        if self.verbose:
            print(f"{'✅' if success else '❌'} セッション完了: {session.session_id} "
                  f"(総時間: {session.total_duration * 1000:.1f}ms)")

    def get_performance_stats(self) -> Dict[str, Any]:
        """セッション数とステップ別の時間統計"""
        if not self.sessions and not self.step_stats:
            return {"message": "統計データがありません"}

        step_statistics = {}
        for name, durations in self.step_stats.items():
            if not durations:
                continue
            values = np.asarray(durations)
            step_statistics[name] = {
                "count": int(values.size),
                "total_time": float(values.sum()),
                "average_time": float(values.mean()),
                "median_time": float(np.median(values)),
                "p90_time": float(np.percentile(values, 90)),
                "max_time": float(values.max()),
            }

        return {
            "total_sessions": len(self.sessions),
            "successful_sessions": sum(1 for s in self.sessions if s.success),
            "commands": [s.command for s in self.sessions],
            "step_statistics": step_statistics,
        }

    def step_timings_csv(self) -> str:
        """ステップ別統計の CSV (合計時間の降順)"""
        stats = self.get_performance_stats().get("step_statistics", {})
        lines = ["step,count,total_s,mean_s,p90_s,max_s"]
        for name, data in sorted(stats.items(), key=lambda item: -item[1]["total_time"]):
            lines.append(f"{name},{data['count']},{data['total_time']:.6f},{data['average_time']:.6f},"
                         f"{data['p90_time']:.6f},{data['max_time']:.6f}")
        return "\n".join(lines) + "\n"

    def print_performance_report(self):
        """ステップ別の時間を表示"""
        stats = self.get_performance_stats()
        if "message" in stats:
            print(f"📊 {stats['message']}")
            return

        print("\n" + "=" * 60)
        print("📊 実行時間レポート")
        print("=" * 60)
        print(f"   コマンド: {', '.join(stats['commands']) or '-'} "
              f"(成功 {stats['successful_sessions']}/{stats['total_sessions']})")

        steps = sorted(stats["step_statistics"].items(), key=lambda item: -item[1]["total_time"])
        grand_total = sum(data["total_time"] for _, data in steps)
        for i, (name, data) in enumerate(steps):
            share = 100.0 * data["total_time"] / grand_total if grand_total > 0 else 0.0
            marker = " 🚨 最大ボトルネック" if i == 0 and len(steps) > 1 else ""
            print(f"\n   {name}:{marker}")
            print(f"     回数 {data['count']} / 合計 {data['total_time']:.2f}s ({share:.1f}%) / "
                  f"平均 {data['average_time'] * 1000:.1f}ms / p90 {data['p90_time'] * 1000:.1f}ms")
        print("=" * 60)

    def reset_stats(self):
        """統計データをリセット"""
        with self._lock:
            self.step_stats.clear()
        self.sessions.clear()
        self.current_session = None
