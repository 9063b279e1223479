"""
投影変換のテスト
原点の定義値、独立実装 (pyproj) との一致、往復変換、範囲外エラーを確認
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# プロジェクトのrootディレクトリをパスに追加
sys.path.append(str(Path(__file__).parent))

from src.projection import get_projection, project_coords, unproject_coords, zone_mask


BNG_PROJ4 = ("+proj=tmerc +lat_0=49 +lon_0=-2 +k=0.9996012717 +x_0=400000 +y_0=-100000 "
             "+ellps=airy +units=m +no_defs")
UTM17N_PROJ4 = "+proj=utm +zone=17 +ellps=WGS84 +units=m +no_defs"


def test_origin_maps_to_false_origin():
    """投影原点は偽原点 (km) に移る"""
    e, n = project_coords(-2.0, 49.0, "BNG")
    assert abs(e - 400.0) < 1e-9
    assert abs(n - (-100.0)) < 1e-9

    e, n = project_coords(-81.0, 0.0, "UTM17N")
    assert abs(e - 500.0) < 1e-9
    assert abs(n) < 1e-9


def test_bng_matches_pyproj():
    """英国ナショナルグリッドが pyproj と 1 m 以内で一致"""
    pyproj = pytest.importorskip("pyproj")
    reference = pyproj.Proj(BNG_PROJ4)

    lon = np.array([-0.1276, -0.5103, 0.3340, -3.1883, -1.2577, -5.0])
    lat = np.array([51.5072, 51.2868, 51.6919, 55.9533, 51.7520, 58.2])
    e, n = project_coords(lon, lat, "BNG")
    ref_e, ref_n = reference(lon, lat)

    assert np.max(np.abs(e - np.asarray(ref_e) / 1000.0)) < 1e-3
    assert np.max(np.abs(n - np.asarray(ref_n) / 1000.0)) < 1e-3


def test_utm17n_matches_pyproj():
    """UTM 17N (デトロイト周辺) が pyproj と 1 m 以内で一致"""
    pyproj = pytest.importorskip("pyproj")
    reference = pyproj.Proj(UTM17N_PROJ4)

    lon = np.array([-83.0458, -83.2871, -82.9105, -80.0, -83.9])
    lat = np.array([42.3314, 42.4410, 42.2550, 40.4, 10.0])
    e, n = project_coords(lon, lat, "UTM17N")
    ref_e, ref_n = reference(lon, lat)

    assert np.max(np.abs(e - np.asarray(ref_e) / 1000.0)) < 1e-3
    assert np.max(np.abs(n - np.asarray(ref_n) / 1000.0)) < 1e-3


def test_round_trip_within_tolerance():
    """順変換と逆変換の往復誤差が 1e-9 度以内"""
    for crs in ("BNG", "UTM17N"):
        proj = get_projection(crs)
        lons = np.linspace(proj.lon_bounds[0], proj.lon_bounds[1], 9)
        lats = np.linspace(proj.lat_bounds[0], min(proj.lat_bounds[1], 80.0), 9)
        lon, lat = np.meshgrid(lons, lats)

        e, n = project_coords(lon, lat, crs)
        back_lon, back_lat = unproject_coords(e, n, crs)
        assert np.max(np.abs(back_lon - lon)) < 1e-9, crs
        assert np.max(np.abs(back_lat - lat)) < 1e-9, crs


def test_scalar_and_array_inputs():
    """スカラー入力はスカラー、配列入力は同形状の配列を返す"""
    e, n = project_coords(-0.1276, 51.5072)
    assert isinstance(e, float) and isinstance(n, float)

    lon = np.full((2, 3), -0.1276)
    lat = np.full((2, 3), 51.5072)
    e_arr, n_arr = project_coords(lon, lat)
    assert e_arr.shape == (2, 3)
    assert np.all(e_arr == e) and np.all(n_arr == n)


def test_out_of_zone_raises():
    """有効範囲外の座標と未知の CRS はエラー"""
    with pytest.raises(ValueError, match="BNG"):
        project_coords(-83.0, 42.3, "BNG")
    with pytest.raises(ValueError, match="UTM17N"):
        project_coords(-0.13, 51.5, "UTM17N")
    with pytest.raises(ValueError):
        project_coords(-0.13, 51.5, "EPSG:4326")


def test_zone_mask():
    """zone_mask は範囲内の点だけを True にする"""
    mask = zone_mask(np.array([-0.1, -83.0, 3.9]), np.array([51.5, 42.3, 62.9]), "BNG")
    assert mask.tolist() == [True, False, True]


if __name__ == "__main__":
    print("🚀 投影変換テスト開始")
    print("=" * 60)

    tests = [
        test_origin_maps_to_false_origin,
        test_bng_matches_pyproj,
        test_utm17n_matches_pyproj,
        test_round_trip_within_tolerance,
        test_scalar_and_array_inputs,
        test_out_of_zone_raises,
        test_zone_mask,
    ]
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
