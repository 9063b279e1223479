"""
データ取り込みモジュール
事件レコードの読み込み・投影・グリッド寸法決定・ヒストグラム化・データセット構築
"""

import logging
import math
import os
from dataclasses import dataclass, field, replace
from datetime import date
from fractions import Fraction
from typing import Any, Dict, IO, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .container import atomic_write_text, read_container, write_container
from .projection import project_coords, zone_mask


logger = logging.getLogger(__name__)

MONTHLY = "monthly"
DAILY = "daily"
STEPS_PER_YEAR = {MONTHLY: 12, DAILY: 365}

# 近似正方形とみなすセル幅・高さの相対差
NEAR_SQUARE_TOLERANCE = 0.1


@dataclass(frozen=True)
class EventRecord:
    """1 件の事件レコード"""
    longitude: float
    latitude: float
    timestamp: date
    crime_type: str


@dataclass(frozen=True)
class RecordSchema:
    """区切りテキストの列名定義"""
    longitude: str = "Longitude"
    latitude: str = "Latitude"
    timestamp: str = "Month"
    crime_type: str = "Crime type"
    delimiter: str = ","

    @classmethod
    def from_config(cls, ingest_config: Dict[str, Any]) -> "RecordSchema":
        return cls(
            longitude=ingest_config.get("longitude_column", cls.longitude),
            latitude=ingest_config.get("latitude_column", cls.latitude),
            timestamp=ingest_config.get("timestamp_column", cls.timestamp),
            crime_type=ingest_config.get("type_column", cls.crime_type),
            delimiter=ingest_config.get("delimiter", cls.delimiter),
        )


@dataclass(frozen=True)
class GridSpec:
    """空間・時間グリッドの幾何情報"""
    rows: int
    cols: int
    origin: Tuple[float, float]        # (easting_km, northing_km) 南西角
    cell_size: Tuple[float, float]     # (width_km, height_km)
    t_steps: int
    t_resolution: str = MONTHLY
    t_start: str = "2000-01"
    crs: str = "BNG"

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError(f"グリッド寸法が不正です: {self.rows}x{self.cols}")
        if self.cell_size[0] <= 0 or self.cell_size[1] <= 0:
            raise ValueError(f"セル寸法が不正です: {self.cell_size}")
        if self.t_steps <= 0:
            raise ValueError(f"時間ステップ数が不正です: {self.t_steps}")
        if self.t_resolution not in STEPS_PER_YEAR:
            raise ValueError(f"時間解像度が不正です: {self.t_resolution}")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.t_steps, self.rows, self.cols)

    @property
    def steps_per_year(self) -> int:
        return STEPS_PER_YEAR[self.t_resolution]

    def is_near_square(self, tolerance: float = NEAR_SQUARE_TOLERANCE) -> bool:
        width, height = self.cell_size
        return abs(width - height) / width <= tolerance + 1e-12

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """(列ごとの easting, 行ごとの northing) のセル中心 km"""
        e0, n0 = self.origin
        width, height = self.cell_size
        eastings = e0 + (np.arange(self.cols) + 0.5) * width
        northings = n0 + (np.arange(self.rows) + 0.5) * height
        return eastings, northings

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rows": self.rows,
            "cols": self.cols,
            "origin": list(self.origin),
            "cell_size": list(self.cell_size),
            "t_steps": self.t_steps,
            "t_resolution": self.t_resolution,
            "t_start": self.t_start,
            "crs": self.crs,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GridSpec":
        return cls(
            rows=int(data["rows"]),
            cols=int(data["cols"]),
            origin=(float(data["origin"][0]), float(data["origin"][1])),
            cell_size=(float(data["cell_size"][0]), float(data["cell_size"][1])),
            t_steps=int(data["t_steps"]),
            t_resolution=data.get("t_resolution", MONTHLY),
            t_start=data.get("t_start", "2000-01"),
            crs=data.get("crs", "BNG"),
        )


@dataclass
class SpatioTemporalGrid:
    """時間 x 行 x 列 のカウントテンソルと種別ごとのサブテンソル"""
    counts: np.ndarray
    per_type: Dict[str, np.ndarray]
    spec: GridSpec
    ingest_stats: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.per_type = {name: np.asarray(tensor, dtype=np.int64)
                         for name, tensor in sorted(self.per_type.items())}
        if self.counts.shape != self.spec.shape:
            raise ValueError(f"カウント形状 {self.counts.shape} がグリッド {self.spec.shape} と一致しません")
        if np.any(self.counts < 0):
            raise ValueError("カウントに負の値があります")
        if not self.per_type:
            raise ValueError("種別サブグリッドがありません")
        total = np.zeros_like(self.counts)
        for name, tensor in self.per_type.items():
            if tensor.shape != self.counts.shape:
                raise ValueError(f"種別 {name} の形状が一致しません")
            total += tensor
        if not np.array_equal(total, self.counts):
            raise ValueError("種別サブグリッドの合計が総カウントと一致しません")

    @property
    def type_names(self) -> List[str]:
        return list(self.per_type)

    @property
    def n_types(self) -> int:
        return len(self.per_type)

    def type_stack(self) -> np.ndarray:
        """種別 x 時間 x 行 x 列 の配列"""
        return np.stack([self.per_type[name] for name in self.type_names])


@dataclass(frozen=True)
class Sample:
    """学習用の 1 サンプル"""
    t: int
    row: int
    col: int
    coords: Tuple[float, float, float]
    ef_t: Tuple[float, ...]
    ef_tm1: Tuple[float, ...]
    target: float


@dataclass
class Dataset:
    """サンプル列の列指向表現"""
    t: np.ndarray
    row: np.ndarray
    col: np.ndarray
    coords: np.ndarray      # (n, 3): easting_km, northing_km, t
    ef_t: np.ndarray        # (n, K): t-1 の種別カウント
    ef_tm1: np.ndarray      # (n, K): t-2 の種別カウント
    target: np.ndarray      # (n,)
    type_names: List[str]
    t_steps: int
    t_resolution: str = MONTHLY

    def __len__(self) -> int:
        return int(self.target.shape[0])

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    @property
    def n_types(self) -> int:
        return len(self.type_names)

    def sample(self, i: int) -> Sample:
        return Sample(
            t=int(self.t[i]),
            row=int(self.row[i]),
            col=int(self.col[i]),
            coords=tuple(float(v) for v in self.coords[i]),
            ef_t=tuple(float(v) for v in self.ef_t[i]),
            ef_tm1=tuple(float(v) for v in self.ef_tm1[i]),
            target=float(self.target[i]),
        )

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            t=self.t[idx], row=self.row[idx], col=self.col[idx],
            coords=self.coords[idx], ef_t=self.ef_t[idx], ef_tm1=self.ef_tm1[idx],
            target=self.target[idx],
        )

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise ValueError("結合するデータセットがありません")
        first = parts[0]
        return replace(
            first,
            t=np.concatenate([p.t for p in parts]),
            row=np.concatenate([p.row for p in parts]),
            col=np.concatenate([p.col for p in parts]),
            coords=np.concatenate([p.coords for p in parts]),
            ef_t=np.concatenate([p.ef_t for p in parts]),
            ef_tm1=np.concatenate([p.ef_tm1 for p in parts]),
            target=np.concatenate([p.target for p in parts]),
        )


Source = Union[str, "os.PathLike[str]", IO[str]]


def parse_records_frame(source: Source, schema: RecordSchema = RecordSchema()) -> Tuple[pd.DataFrame, int]:
    """
    区切りテキストを読み込み、有効な行だけの DataFrame を返す

    Returns:
        (longitude, latitude, timestamp, crime_type 列の DataFrame, 破棄行数)
    """
    # ヘッダーより列の多い行
    malformed: List[List[str]] = []

    def _skip_bad_line(fields: List[str]) -> None:
        malformed.append(fields)
        return None

    try:
        raw = pd.read_csv(source, sep=schema.delimiter, dtype=str, skipinitialspace=True,
                          engine="python", on_bad_lines=_skip_bad_line)
    except pd.errors.EmptyDataError as e:
        raise ValueError("入力にヘッダー行がありません") from e

    for column in (schema.longitude, schema.latitude, schema.timestamp, schema.crime_type):
        if column not in raw.columns:
            raise ValueError(f"必須列がありません: '{column}'")

    lon = pd.to_numeric(raw[schema.longitude], errors="coerce")
    lat = pd.to_numeric(raw[schema.latitude], errors="coerce")
    stamps = raw[schema.timestamp].astype("string").str.strip()
    timestamp = pd.to_datetime(stamps, format="%Y-%m-%d", errors="coerce")
    monthly = pd.to_datetime(stamps, format="%Y-%m", errors="coerce")
    timestamp = timestamp.fillna(monthly)
    crime_type = raw[schema.crime_type].astype("string").str.strip()

    valid = (
        lon.between(-180.0, 180.0)
        & lat.between(-90.0, 90.0)
        & timestamp.notna()
        & crime_type.notna()
        & (crime_type.str.len() > 0)
    ).fillna(False).astype(bool)

    frame = pd.DataFrame({
        "longitude": lon[valid].astype(float),
        "latitude": lat[valid].astype(float),
        "timestamp": timestamp[valid],
        "crime_type": crime_type[valid].astype(str),
    }).reset_index(drop=True)

    dropped = int((~valid).sum()) + len(malformed)
    if dropped:
        logger.info(f"不正な行を {dropped} 件破棄しました")
    return frame, dropped


def parse_records(source: Source, schema: RecordSchema = RecordSchema()) -> Tuple[List[EventRecord], int]:
    """
    区切りテキストから EventRecord のリストを作成

    Args:
        source: ファイルパスまたはテキストストリーム (ヘッダー行必須)
        schema: 列名定義

    Returns:
        (レコード列 (入力順), 破棄行数)
    """
    frame, dropped = parse_records_frame(source, schema)
    records = [
        EventRecord(float(lon), float(lat), ts.date(), str(kind))
        for lon, lat, ts, kind in zip(frame["longitude"], frame["latitude"],
                                      frame["timestamp"], frame["crime_type"])
    ]
    return records, dropped


def _records_to_frame(records: Union[Sequence[EventRecord], pd.DataFrame]) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        return records
    return pd.DataFrame({
        "longitude": [r.longitude for r in records],
        "latitude": [r.latitude for r in records],
        "timestamp": pd.to_datetime([r.timestamp for r in records]),
        "crime_type": [r.crime_type for r in records],
    })


def _parse_start(t_start: str) -> pd.Timestamp:
    fmt = "%Y-%m-%d" if t_start.count("-") == 2 else "%Y-%m"
    return pd.to_datetime(t_start, format=fmt)


def time_index(timestamps: pd.Series, t_start: str, resolution: str) -> np.ndarray:
    """タイムスタンプを時間インデックス (t_start が 0) に変換"""
    start = _parse_start(t_start)
    ts = pd.DatetimeIndex(pd.to_datetime(timestamps))
    if resolution == MONTHLY:
        return ((ts.year - start.year) * 12 + (ts.month - start.month)).to_numpy(dtype=np.int64)
    if resolution == DAILY:
        return (ts.normalize() - start.normalize()).days.to_numpy(dtype=np.int64)
    raise ValueError(f"時間解像度が不正です: {resolution}")


def extent_from_points(easting: np.ndarray, northing: np.ndarray) -> Tuple[float, float, float, float]:
    """点群の外接矩形 (min_e, min_n, max_e, max_n)"""
    easting = np.asarray(easting, dtype=float)
    northing = np.asarray(northing, dtype=float)
    if easting.size == 0:
        raise ValueError("点がないため範囲を決められません")
    return (float(easting.min()), float(northing.min()),
            float(easting.max()), float(northing.max()))


def compute_grid_dims(extent: Tuple[float, float, float, float], seed_n: int) -> Tuple[int, int]:
    """
    ほぼ正方形のセルになる (rows, cols) を決める

    N x N グリッドのセル寸法比を小さな整数比で近似し、約 N^2 セルに拡大してから
    セル幅と高さの差が 10% 以内になるまで行または列を 1 つずつ増やす。

    Args:
        extent: (min_e, min_n, max_e, max_n) km
        seed_n: 初期分割数 N

    Returns:
        (rows, cols)。rows は北向き、cols は東向きの分割数
    """
    min_e, min_n, max_e, max_n = extent
    width = max_e - min_e
    height = max_n - min_n
    if not (math.isfinite(width) and math.isfinite(height)) or width <= 0 or height <= 0:
        raise ValueError(f"範囲が退化しています: 幅 {width} km, 高さ {height} km")
    if seed_n < 1:
        raise ValueError(f"初期分割数が不正です: {seed_n}")

    # N x N グリッドのセル寸法
    dx = width / seed_n
    dy = height / seed_n
    ratio = Fraction(dy / dx).limit_denominator(10)
    if ratio.numerator == 0:
        ratio = Fraction(1, 10)
    p, q = ratio.numerator, ratio.denominator

    k = max(1, round(math.sqrt(seed_n * seed_n / (p * q))))
    rows, cols = p * k, q * k

    for _ in range(10 * seed_n + 100):
        cell_w = width / cols
        cell_h = height / rows
        if abs(cell_w - cell_h) / cell_w <= NEAR_SQUARE_TOLERANCE:
            return rows, cols
        if cell_w > cell_h:
            cols += 1
        else:
            rows += 1
    raise ValueError(f"ほぼ正方形のセルが見つかりません: 幅 {width} km, 高さ {height} km")


def grid_spec_from_extent(extent: Tuple[float, float, float, float], seed_n: int,
                          t_steps: int, t_resolution: str = MONTHLY,
                          t_start: str = "2000-01", crs: str = "BNG") -> GridSpec:
    """範囲と初期分割数から GridSpec を作成"""
    rows, cols = compute_grid_dims(extent, seed_n)
    min_e, min_n, max_e, max_n = extent
    return GridSpec(
        rows=rows,
        cols=cols,
        origin=(min_e, min_n),
        cell_size=((max_e - min_e) / cols, (max_n - min_n) / rows),
        t_steps=t_steps,
        t_resolution=t_resolution,
        t_start=t_start,
        crs=crs,
    )


def _bin_index(values: np.ndarray, origin: float, size: float, n_bins: int) -> np.ndarray:
    """境界上の点は小さい方のビン。範囲外は -1"""
    pos = (values - origin) / size
    pos = np.where(np.isfinite(pos), pos, -1.0)
    # 範囲の最大値が丸め誤差で n_bins をわずかに超える場合
    pos = np.where((pos > n_bins) & (pos <= n_bins * (1.0 + 1e-9)), float(n_bins), pos)
    idx = np.ceil(pos).astype(np.int64) - 1
    idx = np.where(pos == 0.0, 0, idx)
    inside = (pos >= 0.0) & (pos <= n_bins)
    return np.where(inside, idx, -1)


def histogram(records: Union[Sequence[EventRecord], pd.DataFrame], spec: GridSpec,
              type_names: Optional[Sequence[str]] = None) -> SpatioTemporalGrid:
    """
    レコードをグリッドに集計

    Args:
        records: EventRecord 列または parse_records_frame の DataFrame
        spec: グリッド定義
        type_names: 種別名 (省略時はレコードに現れた種別の昇順)

    Returns:
        SpatioTemporalGrid (ingest_stats に raw / out_of_extent を記録)
    """
    frame = _records_to_frame(records)
    n_raw = len(frame)

    if type_names is None:
        type_names = sorted(set(frame["crime_type"])) if n_raw else ["all"]
    type_names = list(type_names)

    lon = frame["longitude"].to_numpy(dtype=float)
    lat = frame["latitude"].to_numpy(dtype=float)
    in_zone = zone_mask(lon, lat, spec.crs)

    easting = np.full(n_raw, np.nan)
    northing = np.full(n_raw, np.nan)
    if in_zone.any():
        easting[in_zone], northing[in_zone] = project_coords(lon[in_zone], lat[in_zone], spec.crs)

    col = _bin_index(easting, spec.origin[0], spec.cell_size[0], spec.cols)
    row = _bin_index(northing, spec.origin[1], spec.cell_size[1], spec.rows)
    t = time_index(frame["timestamp"], spec.t_start, spec.t_resolution) if n_raw else np.zeros(0, np.int64)

    type_lookup = {name: i for i, name in enumerate(type_names)}
    kind = frame["crime_type"].map(type_lookup).fillna(-1).to_numpy(dtype=np.int64)

    keep = in_zone & (col >= 0) & (row >= 0) & (t >= 0) & (t < spec.t_steps) & (kind >= 0)
    out_of_extent = int(n_raw - keep.sum())

    stack = np.zeros((len(type_names),) + spec.shape, dtype=np.int64)
    np.add.at(stack, (kind[keep], t[keep], row[keep], col[keep]), 1)

    if out_of_extent:
        logger.info(f"範囲外のレコードを {out_of_extent} 件除外しました")

    return SpatioTemporalGrid(
        counts=stack.sum(axis=0),
        per_type={name: stack[i] for i, name in enumerate(type_names)},
        spec=spec,
        ingest_stats={"raw": n_raw, "out_of_extent": out_of_extent},
    )


def build_grid_from_frame(frame: pd.DataFrame, seed_n: int, crs: str,
                          resolution: str = MONTHLY) -> SpatioTemporalGrid:
    """読み込んだレコードから範囲・期間を決めてグリッドを作成"""
    if frame.empty:
        raise ValueError("有効なレコードがありません")

    lon = frame["longitude"].to_numpy(dtype=float)
    lat = frame["latitude"].to_numpy(dtype=float)
    in_zone = zone_mask(lon, lat, crs)
    if not in_zone.any():
        raise ValueError(f"投影 {crs} の有効範囲内にレコードがありません")
    easting, northing = project_coords(lon[in_zone], lat[in_zone], crs)

    first = pd.Timestamp(frame["timestamp"].min())
    t_start = first.strftime("%Y-%m") if resolution == MONTHLY else first.strftime("%Y-%m-%d")
    t_last = int(time_index(frame["timestamp"], t_start, resolution).max())

    spec = grid_spec_from_extent(
        extent_from_points(easting, northing), seed_n,
        t_steps=t_last + 1, t_resolution=resolution, t_start=t_start, crs=crs,
    )
    logger.info(
        f"グリッド決定: {spec.rows}x{spec.cols}, セル {spec.cell_size[0]:.3f}x{spec.cell_size[1]:.3f} km, "
        f"{spec.t_steps} ステップ"
    )
    return histogram(frame, spec)


def build_dataset(grid: SpatioTemporalGrid, active_cells_only: bool = False) -> Dataset:
    """
    グリッドからサンプルを作成 (t >= 2 の全セル)

    Args:
        grid: 入力グリッド
        active_cells_only: 期間中に 1 件もないセルを除外するか

    Returns:
        (t, row, col) 昇順の Dataset
    """
    T, R, C = grid.counts.shape
    if T < 3:
        raise ValueError(f"時間ステップが 3 未満です: {T}")

    eastings, northings = grid.spec.cell_centers()
    types = grid.type_stack().astype(float)   # (K, T, R, C)

    tt, rr, cc = np.meshgrid(np.arange(2, T), np.arange(R), np.arange(C), indexing="ij")
    tt, rr, cc = tt.ravel(), rr.ravel(), cc.ravel()

    if active_cells_only:
        active = grid.counts.sum(axis=0) > 0
        keep = active[rr, cc]
        tt, rr, cc = tt[keep], rr[keep], cc[keep]

    coords = np.column_stack([eastings[cc], northings[rr], tt.astype(float)])
    ef_t = types[:, tt - 1, rr, cc].T
    ef_tm1 = types[:, tt - 2, rr, cc].T
    target = grid.counts[tt, rr, cc].astype(float)

    return Dataset(
        t=tt, row=rr, col=cc,
        coords=coords,
        ef_t=np.ascontiguousarray(ef_t),
        ef_tm1=np.ascontiguousarray(ef_tm1),
        target=target,
        type_names=grid.type_names,
        t_steps=T,
        t_resolution=grid.spec.t_resolution,
    )


def split_train_test(dataset: Dataset, seed: int) -> Tuple[Dataset, Dataset]:
    """
    最終 1 年を検証、それ以前を学習に分割し、それぞれをシャッフル

    Args:
        dataset: build_dataset の出力
        seed: シャッフル用シード

    Returns:
        (train, test)
    """
    steps_per_year = STEPS_PER_YEAR[dataset.t_resolution]
    if dataset.t_steps <= steps_per_year:
        raise ValueError(f"期間が 1 年以下です: {dataset.t_steps} ステップ")

    cutoff = dataset.t_steps - steps_per_year
    is_test = dataset.t >= cutoff
    train_idx = np.flatnonzero(~is_test)
    test_idx = np.flatnonzero(is_test)
    if train_idx.size == 0:
        raise ValueError("学習データが空です (期間が短すぎます)")

    rng = np.random.default_rng(seed)
    train_idx = train_idx[rng.permutation(train_idx.size)]
    test_idx = test_idx[rng.permutation(test_idx.size)]
    return dataset.subset(train_idx), dataset.subset(test_idx)


def save_grid(grid: SpatioTemporalGrid, path: str):
    """グリッドをコンテナ形式で保存"""
    meta = {
        "kind": "spatiotemporal_grid",
        "spec": grid.spec.to_dict(),
        "type_names": grid.type_names,
        "ingest_stats": dict(sorted(grid.ingest_stats.items())),
    }
    arrays = {"counts": grid.counts}
    arrays.update({f"type/{name}": grid.per_type[name] for name in grid.type_names})
    write_container(path, meta, arrays)


def load_grid(path: str) -> SpatioTemporalGrid:
    """コンテナ形式のグリッドを読み込み"""
    meta, arrays = read_container(path)
    if meta.get("kind") != "spatiotemporal_grid":
        raise ValueError(f"グリッドファイルではありません: {path}")
    return SpatioTemporalGrid(
        counts=arrays["counts"],
        per_type={name: arrays[f"type/{name}"] for name in meta["type_names"]},
        spec=GridSpec.from_dict(meta["spec"]),
        ingest_stats={k: int(v) for k, v in meta.get("ingest_stats", {}).items()},
    )


def format_matrix_csv(matrix: np.ndarray, fmt: str = "%d") -> str:
    """2 次元配列を CSV 文字列に (行 0 が先頭)"""
    lines = [",".join(fmt % v for v in row) for row in np.asarray(matrix)]
    return "\n".join(lines) + "\n"


def export_grid_csv(grid: SpatioTemporalGrid, directory: str):
    """時間ステップごとの総カウント行列を CSV で出力"""
    os.makedirs(directory, exist_ok=True)
    width = len(str(grid.spec.t_steps - 1))
    for t in range(grid.spec.t_steps):
        atomic_write_text(os.path.join(directory, f"counts_t{t:0{width}d}.csv"),
                          format_matrix_csv(grid.counts[t]))
