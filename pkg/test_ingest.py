"""
データ取り込みのテスト
レコード解析、グリッド寸法決定、ヒストグラム化、データセット構築、分割、保存形式を確認
"""

import io
import sys
from datetime import date
from pathlib import Path

import numpy as np
import pytest

# プロジェクトのrootディレクトリをパスに追加
sys.path.append(str(Path(__file__).parent))

from src.ingest import (
    EventRecord, GridSpec, RecordSchema, SpatioTemporalGrid, _bin_index, build_dataset,
    build_grid_from_frame, compute_grid_dims, export_grid_csv, grid_spec_from_extent, histogram,
    load_grid, parse_records, parse_records_frame, save_grid, split_train_test,
)
from src.projection import unproject_coords


HEADER = "Crime ID,Month,Longitude,Latitude,Crime type\n"


def _record_at(easting_km, northing_km, when, kind, crs="BNG"):
    lon, lat = unproject_coords(easting_km, northing_km, crs)
    return EventRecord(lon, lat, when, kind)


def _small_spec(t_steps=2):
    return GridSpec(rows=2, cols=2, origin=(400.0, 100.0), cell_size=(1.0, 1.0),
                    t_steps=t_steps, t_resolution="monthly", t_start="2020-01", crs="BNG")


def _grid_from_types(per_type, cell=1.0):
    first = next(iter(per_type.values()))
    T, R, C = first.shape
    spec = GridSpec(rows=R, cols=C, origin=(0.0, 0.0), cell_size=(cell, cell), t_steps=T)
    return SpatioTemporalGrid(counts=sum(per_type.values()), per_type=per_type, spec=spec)


def test_parse_drops_invalid_rows():
    """緯度が欠けた 2 行は破棄される"""
    text = HEADER + (
        "a,2019-01,-0.1276,51.5072,Burglary\n"
        "b,2019-01,-0.1000,,Burglary\n"
        "c,2019-02,-0.1100,51.5000,Robbery\n"
        "d,2019-02,-0.1200,,Robbery\n"
        "e,2019-03,-0.1300,51.4900,Burglary\n"
    )
    records, dropped = parse_records(io.StringIO(text))
    assert len(records) == 3
    assert dropped == 2
    assert records[0] == EventRecord(-0.1276, 51.5072, date(2019, 1, 1), "Burglary")
    assert [r.crime_type for r in records] == ["Burglary", "Robbery", "Burglary"]


def test_parse_skips_row_with_extra_fields():
    """列数がヘッダーより多い行は破棄して解析を続ける"""
    text = (
        "Month,Longitude,Latitude,Crime type\n"
        "2019-01,-0.1,51.5,Burglary\n"
        "2019-01,-0.1,51.5,Burglary,EXTRA\n"
        "2019-02,-0.2,51.4,Robbery\n"
    )
    records, dropped = parse_records(io.StringIO(text))
    assert len(records) == 2
    assert dropped == 1
    assert [r.crime_type for r in records] == ["Burglary", "Robbery"]


def test_parse_header_only():
    """ヘッダーだけの入力は空"""
    records, dropped = parse_records(io.StringIO(HEADER))
    assert records == []
    assert dropped == 0


def test_parse_rejects_bad_timestamp_and_type():
    """不正な日付・空の種別は破棄、日単位の日付は受理"""
    text = HEADER + (
        "a,2019-13,-0.1,51.5,Burglary\n"
        "b,2019-01-15,-0.1,51.5,Burglary\n"
        "c,2019-01,-0.1,51.5,\n"
        "d,2019-01,-0.1,95.0,Burglary\n"
    )
    records, dropped = parse_records(io.StringIO(text))
    assert dropped == 3
    assert records[0].timestamp == date(2019, 1, 15)


def test_parse_custom_schema():
    """列名と区切り文字は設定で変えられる"""
    text = "lon;lat;when;offense\n-83.05;42.33;2020-03-04;ASSAULT\n"
    schema = RecordSchema(longitude="lon", latitude="lat", timestamp="when",
                          crime_type="offense", delimiter=";")
    frame, dropped = parse_records_frame(io.StringIO(text), schema)
    assert dropped == 0
    assert frame["crime_type"].tolist() == ["ASSAULT"]


def test_parse_missing_column():
    """必須列がなければ列名付きのエラー"""
    with pytest.raises(ValueError, match="Crime type"):
        parse_records(io.StringIO("Month,Longitude,Latitude\n2019-01,-0.1,51.5\n"))


def test_grid_dims_london_extent():
    """ロンドン相当の範囲 (43.7 km x 56.2 km) は 36 x 28 セル"""
    rows, cols = compute_grid_dims((0.0, 0.0, 43.7, 56.2), 32)
    assert (rows, cols) == (36, 28)
    assert abs(43.7 / cols - 1.56) < 0.01
    assert abs(56.2 / rows - 1.56) < 0.01


def test_grid_dims_detroit_extent():
    """デトロイト相当の範囲 (45.6 km x 36.25 km) は比 4:5 から始まり最初の近似正方形 24 x 30 で止まる"""
    rows, cols = compute_grid_dims((0.0, 0.0, 45.6, 36.25), 28)
    assert (rows, cols) == (24, 30)
    assert abs(45.6 / cols - 36.25 / rows) / (45.6 / cols) <= 0.1


def test_grid_dims_square_extent():
    """正方形の範囲はそのまま N x N"""
    assert compute_grid_dims((0.0, 0.0, 10.0, 10.0), 10) == (10, 10)


def test_grid_dims_near_square_cells():
    """さまざまな範囲でセルの縦横差が 10% 以内"""
    rng = np.random.default_rng(3)
    for _ in range(50):
        width, height = rng.uniform(5.0, 80.0, size=2)
        seed_n = int(rng.integers(5, 40))
        spec = grid_spec_from_extent((0.0, 0.0, width, height), seed_n, t_steps=1)
        assert spec.is_near_square()


def test_grid_dims_degenerate_extent():
    """幅または高さが 0 の範囲はエラー"""
    with pytest.raises(ValueError):
        compute_grid_dims((0.0, 0.0, 0.0, 5.0), 10)


def test_bin_boundary_goes_to_lower_cell():
    """共有境界上の点は小さい方のセル、最小端と最大端は範囲内"""
    idx = _bin_index(np.array([0.0, 0.5, 1.0, 1.5, 2.0, 2.0001, -0.1]), 0.0, 1.0, 2)
    assert idx.tolist() == [0, 0, 0, 1, 1, -1, -1]


def test_histogram_hand_count():
    """4 件・2 種別・2 ステップの手計算と一致し、範囲外は数えられる"""
    records = [
        _record_at(400.5, 100.5, date(2020, 1, 1), "Burglary"),
        _record_at(401.5, 100.5, date(2020, 1, 1), "Theft"),
        _record_at(401.5, 101.5, date(2020, 2, 1), "Theft"),
        _record_at(401.5, 101.5, date(2020, 2, 1), "Burglary"),
        _record_at(410.0, 110.0, date(2020, 1, 1), "Theft"),      # 範囲外
        _record_at(400.5, 100.5, date(2020, 3, 1), "Theft"),      # 期間外
    ]
    grid = histogram(records, _small_spec())

    expected = np.zeros((2, 2, 2), dtype=np.int64)
    expected[0, 0, 0] = 1
    expected[0, 0, 1] = 1
    expected[1, 1, 1] = 2
    assert np.array_equal(grid.counts, expected)
    assert grid.type_names == ["Burglary", "Theft"]
    assert grid.per_type["Burglary"][1, 1, 1] == 1
    assert grid.per_type["Theft"][1, 1, 1] == 1
    assert grid.ingest_stats == {"raw": 6, "out_of_extent": 2}
    assert grid.counts.sum() + grid.ingest_stats["out_of_extent"] == len(records)


def test_histogram_single_event():
    """セル中心の 1 件は 1 つのセルだけに入る"""
    grid = histogram([_record_at(401.5, 100.5, date(2020, 1, 1), "Robbery")], _small_spec(t_steps=1))
    assert grid.counts.shape == (1, 2, 2)
    assert grid.counts.sum() == 1
    assert grid.counts[0, 0, 1] == 1


def test_build_grid_from_frame_conserves_events():
    """CSV からの一括処理で全件が保存される (範囲の端も含む)"""
    rng = np.random.default_rng(0)
    lines = [HEADER]
    for i in range(200):
        lon = rng.uniform(-0.5, 0.3)
        lat = rng.uniform(51.3, 51.7)
        month = 1 + int(rng.integers(0, 12))
        kind = "Burglary" if i % 3 else "Robbery"
        lines.append(f"{i},2019-{month:02d},{lon:.6f},{lat:.6f},{kind}\n")
    frame, dropped = parse_records_frame(io.StringIO("".join(lines)))

    grid = build_grid_from_frame(frame, seed_n=8, crs="BNG")
    assert dropped == 0
    assert grid.ingest_stats["out_of_extent"] == 0
    assert int(grid.counts.sum()) == 200
    assert grid.spec.is_near_square()
    assert grid.spec.t_start == "2019-01"


def test_build_dataset_earliest_step():
    """T=3 のグリッドでは t=2 のサンプルだけ、セル数と同数"""
    rng = np.random.default_rng(1)
    a = rng.integers(0, 5, size=(3, 4, 5))
    b = rng.integers(0, 5, size=(3, 4, 5))
    grid = _grid_from_types({"a": a, "b": b})

    dataset = build_dataset(grid)
    assert len(dataset) == 20
    assert set(dataset.t.tolist()) == {2}

    sample = next(s for s in dataset if s.row == 1 and s.col == 3)
    assert sample.ef_t == (float(a[1, 1, 3]), float(b[1, 1, 3]))
    assert sample.ef_tm1 == (float(a[0, 1, 3]), float(b[0, 1, 3]))
    assert sample.target == float(a[2, 1, 3] + b[2, 1, 3])
    assert sample.coords == (3.5, 1.5, 2.0)


def test_build_dataset_active_cells_only():
    """期間中ゼロのセルは除外できる"""
    counts = np.ones((4, 2, 2), dtype=np.int64)
    counts[:, 0, 0] = 0
    grid = _grid_from_types({"all": counts})
    assert len(build_dataset(grid)) == 8
    assert len(build_dataset(grid, active_cells_only=True)) == 6


def test_split_monthly_last_year():
    """9 年分の月次データは最終 12 ステップが検証"""
    grid = _grid_from_types({"all": np.ones((108, 2, 3), dtype=np.int64)})
    train, test = split_train_test(build_dataset(grid), seed=5)
    assert set(test.t.tolist()) == set(range(96, 108))
    assert len(test) == 12 * 6
    assert train.t.max() == 95 and train.t.min() == 2


def test_split_daily_last_year():
    """6 年分の日次データは最終 365 ステップが検証"""
    per_type = {"all": np.ones((2190, 1, 1), dtype=np.int64)}
    spec = GridSpec(rows=1, cols=1, origin=(0.0, 0.0), cell_size=(1.0, 1.0), t_steps=2190,
                    t_resolution="daily", t_start="2017-01-01")
    grid = SpatioTemporalGrid(counts=per_type["all"], per_type=per_type, spec=spec)
    train, test = split_train_test(build_dataset(grid), seed=0)
    assert len(test) == 365
    assert test.t.min() == 2190 - 365


def test_split_is_deterministic():
    """同じシードなら同じ並び、異なるシードなら異なる並び"""
    grid = _grid_from_types({"all": np.arange(30 * 3 * 3).reshape(30, 3, 3) % 7})
    dataset = build_dataset(grid)
    first_train, first_test = split_train_test(dataset, seed=11)
    second_train, second_test = split_train_test(dataset, seed=11)
    other_train, _ = split_train_test(dataset, seed=12)

    assert np.array_equal(first_train.t, second_train.t)
    assert np.array_equal(first_test.row, second_test.row)
    assert not np.array_equal(first_train.t, other_train.t)


def test_split_too_short():
    """1 年以下の期間は分割できない"""
    grid = _grid_from_types({"all": np.ones((12, 2, 2), dtype=np.int64)})
    with pytest.raises(ValueError):
        split_train_test(build_dataset(grid), seed=0)


def test_grid_validation():
    """種別の合計が総カウントと一致しないグリッドはエラー"""
    spec = GridSpec(rows=1, cols=1, origin=(0.0, 0.0), cell_size=(1.0, 1.0), t_steps=1)
    with pytest.raises(ValueError):
        SpatioTemporalGrid(counts=np.array([[[3]]]), per_type={"a": np.array([[[2]]])}, spec=spec)


def test_grid_container_save_load(tmp_path):
    """保存したグリッドを読み戻すと同一、同じ内容は同じバイト列"""
    rng = np.random.default_rng(2)
    grid = _grid_from_types({"x": rng.integers(0, 9, size=(5, 3, 4)),
                             "y": rng.integers(0, 9, size=(5, 3, 4))}, cell=1.25)
    first = tmp_path / "a.gtwc"
    second = tmp_path / "b.gtwc"
    save_grid(grid, str(first))
    save_grid(grid, str(second))

    loaded = load_grid(str(first))
    assert np.array_equal(loaded.counts, grid.counts)
    assert loaded.type_names == grid.type_names
    assert loaded.spec == grid.spec
    assert first.read_bytes() == second.read_bytes()


def test_export_grid_csv(tmp_path):
    """時間ステップごとの CSV が出力される"""
    grid = _grid_from_types({"all": np.arange(12).reshape(3, 2, 2)})
    export_grid_csv(grid, str(tmp_path / "csv"))
    files = sorted(p.name for p in (tmp_path / "csv").iterdir())
    assert files == ["counts_t0.csv", "counts_t1.csv", "counts_t2.csv"]
    assert (tmp_path / "csv" / "counts_t1.csv").read_text() == "4,5\n6,7\n"


if __name__ == "__main__":
    import inspect
    import tempfile

    print("🚀 データ取り込みテスト開始")
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
