"""
地図投影モジュール
経緯度を横メルカトル図法 (英国ナショナルグリッド / UTM 17N) の km 座標へ変換
"""

import logging
from dataclasses import dataclass
from typing import Dict, Tuple, Union

import numpy as np


logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class TransverseMercator:
    """横メルカトル投影のパラメータ"""
    name: str
    semi_major: float           # 長半径 a (m)
    flattening: float           # 扁平率 f
    central_meridian: float     # 中央子午線 (度)
    latitude_origin: float      # 原点緯度 (度)
    scale_factor: float         # 中央子午線上の縮尺係数
    false_easting: float        # (m)
    false_northing: float       # (m)
    lon_bounds: Tuple[float, float]
    lat_bounds: Tuple[float, float]

    @property
    def third_flattening(self) -> float:
        return self.flattening / (2.0 - self.flattening)

    @property
    def eccentricity(self) -> float:
        return float(np.sqrt(self.flattening * (2.0 - self.flattening)))

    @property
    def rectifying_radius(self) -> float:
        n = self.third_flattening
        n2 = n * n
        return self.semi_major / (1.0 + n) * (1.0 + n2 / 4.0 + n2 * n2 / 64.0 + n2 * n2 * n2 / 256.0)


AIRY_1830_A = 6377563.396
AIRY_1830_B = 6356256.910
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563

PROJECTIONS: Dict[str, TransverseMercator] = {
    "BNG": TransverseMercator(
        name="BNG",
        semi_major=AIRY_1830_A,
        flattening=(AIRY_1830_A - AIRY_1830_B) / AIRY_1830_A,
        central_meridian=-2.0,
        latitude_origin=49.0,
        scale_factor=0.9996012717,
        false_easting=400000.0,
        false_northing=-100000.0,
        lon_bounds=(-10.0, 4.0),
        lat_bounds=(48.0, 63.0),
    ),
    "UTM17N": TransverseMercator(
        name="UTM17N",
        semi_major=WGS84_A,
        flattening=WGS84_F,
        central_meridian=-81.0,
        latitude_origin=0.0,
        scale_factor=0.9996,
        false_easting=500000.0,
        false_northing=0.0,
        lon_bounds=(-84.0, -78.0),
        lat_bounds=(0.0, 84.0),
    ),
}


def _series_coefficients(n: float) -> Tuple[np.ndarray, np.ndarray]:
    """Krüger 級数の順変換 (alpha) と逆変換 (beta) 係数 (n の 6 次まで)"""
    n2 = n * n
    n3 = n2 * n
    n4 = n3 * n
    n5 = n4 * n
    n6 = n5 * n

    alpha = np.array([
        n / 2 - 2 * n2 / 3 + 5 * n3 / 16 + 41 * n4 / 180 - 127 * n5 / 288 + 7891 * n6 / 37800,
        13 * n2 / 48 - 3 * n3 / 5 + 557 * n4 / 1440 + 281 * n5 / 630 - 1983433 * n6 / 1935360,
        61 * n3 / 240 - 103 * n4 / 140 + 15061 * n5 / 26880 + 167603 * n6 / 181440,
        49561 * n4 / 161280 - 179 * n5 / 168 + 6601661 * n6 / 7257600,
        34729 * n5 / 80640 - 3418889 * n6 / 1995840,
        212378941 * n6 / 319334400,
    ])
    beta = np.array([
        n / 2 - 2 * n2 / 3 + 37 * n3 / 96 - n4 / 360 - 81 * n5 / 512 + 96199 * n6 / 604800,
        n2 / 48 + n3 / 15 - 437 * n4 / 1440 + 46 * n5 / 105 - 1118711 * n6 / 3870720,
        17 * n3 / 480 - 37 * n4 / 840 - 209 * n5 / 4480 + 5569 * n6 / 90720,
        4397 * n4 / 161280 - 11 * n5 / 504 - 830251 * n6 / 7257600,
        4583 * n5 / 161280 - 108847 * n6 / 3991680,
        20648693 * n6 / 638668800,
    ])
    return alpha, beta


def _conformal_tau(tau: np.ndarray, e: float) -> np.ndarray:
    sigma = np.sinh(e * np.arctanh(e * tau / np.sqrt(1.0 + tau * tau)))
    return tau * np.sqrt(1.0 + sigma * sigma) - sigma * np.sqrt(1.0 + tau * tau)


def _forward_xi_eta(proj: TransverseMercator, lat_rad: np.ndarray,
                    dlon_rad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    alpha, _ = _series_coefficients(proj.third_flattening)
    tau_p = _conformal_tau(np.tan(lat_rad), proj.eccentricity)

    xi_p = np.arctan2(tau_p, np.cos(dlon_rad))
    eta_p = np.arcsinh(np.sin(dlon_rad) / np.sqrt(tau_p * tau_p + np.cos(dlon_rad) ** 2))

    xi = xi_p.copy()
    eta = eta_p.copy()
    for j, a_j in enumerate(alpha, start=1):
        xi = xi + a_j * np.sin(2 * j * xi_p) * np.cosh(2 * j * eta_p)
        eta = eta + a_j * np.cos(2 * j * xi_p) * np.sinh(2 * j * eta_p)
    return xi, eta


def _origin_xi(proj: TransverseMercator) -> float:
    xi0, _ = _forward_xi_eta(proj, np.array(np.radians(proj.latitude_origin)), np.array(0.0))
    return float(xi0)


def _check_zone(proj: TransverseMercator, lon: np.ndarray, lat: np.ndarray):
    lon_lo, lon_hi = proj.lon_bounds
    lat_lo, lat_hi = proj.lat_bounds
    outside = (lon < lon_lo) | (lon > lon_hi) | (lat < lat_lo) | (lat > lat_hi) | ~np.isfinite(lon) | ~np.isfinite(lat)
    if np.any(outside):
        raise ValueError(
            f"座標が投影 {proj.name} の有効範囲外です "
            f"(経度 {lon_lo}..{lon_hi}, 緯度 {lat_lo}..{lat_hi})"
        )


def zone_mask(lon: np.ndarray, lat: np.ndarray, crs: str) -> np.ndarray:
    """投影の有効範囲内にある点のマスク"""
    proj = get_projection(crs)
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    lon_lo, lon_hi = proj.lon_bounds
    lat_lo, lat_hi = proj.lat_bounds
    return (lon >= lon_lo) & (lon <= lon_hi) & (lat >= lat_lo) & (lat <= lat_hi)


def get_projection(crs: str) -> TransverseMercator:
    """CRS 名から投影パラメータを取得"""
    try:
        return PROJECTIONS[crs.upper()]
    except KeyError:
        raise ValueError(f"未対応の CRS: {crs} (対応: {', '.join(PROJECTIONS)})") from None


def project_coords(lon: ArrayLike, lat: ArrayLike, crs: str = "BNG") -> Tuple[ArrayLike, ArrayLike]:
    """
    経緯度 (度) を投影座標 (km) に変換

    測地系変換 (WGS84 -> OSGB36) は行わない。誤差は 125 m 程度でセル寸法より十分小さい。

    Args:
        lon: 経度 (度)。スカラーまたは配列
        lat: 緯度 (度)
        crs: "BNG" または "UTM17N"

    Returns:
        (easting_km, northing_km)
    """
    proj = get_projection(crs)
    scalar = np.ndim(lon) == 0 and np.ndim(lat) == 0
    lon_arr = np.asarray(lon, dtype=float)
    lat_arr = np.asarray(lat, dtype=float)
    _check_zone(proj, lon_arr, lat_arr)

    xi, eta = _forward_xi_eta(
        proj,
        np.radians(lat_arr),
        np.radians(lon_arr - proj.central_meridian),
    )
    k0_a = proj.scale_factor * proj.rectifying_radius
    easting = (proj.false_easting + k0_a * eta) / 1000.0
    northing = (proj.false_northing + k0_a * (xi - _origin_xi(proj))) / 1000.0

    if scalar:
        return float(easting), float(northing)
    return easting, northing


def unproject_coords(easting_km: ArrayLike, northing_km: ArrayLike,
                     crs: str = "BNG") -> Tuple[ArrayLike, ArrayLike]:
    """
    投影座標 (km) を経緯度 (度) に逆変換

    Returns:
        (lon, lat)
    """
    proj = get_projection(crs)
    scalar = np.ndim(easting_km) == 0 and np.ndim(northing_km) == 0
    e_m = np.asarray(easting_km, dtype=float) * 1000.0
    n_m = np.asarray(northing_km, dtype=float) * 1000.0

    _, beta = _series_coefficients(proj.third_flattening)
    k0_a = proj.scale_factor * proj.rectifying_radius
    xi = (n_m - proj.false_northing) / k0_a + _origin_xi(proj)
    eta = (e_m - proj.false_easting) / k0_a

    xi_p = xi.copy()
    eta_p = eta.copy()
    for j, b_j in enumerate(beta, start=1):
        xi_p = xi_p - b_j * np.sin(2 * j * xi) * np.cosh(2 * j * eta)
        eta_p = eta_p - b_j * np.cos(2 * j * xi) * np.sinh(2 * j * eta)

    tau_p = np.sin(xi_p) / np.sqrt(np.sinh(eta_p) ** 2 + np.cos(xi_p) ** 2)
    dlon = np.arctan2(np.sinh(eta_p), np.cos(xi_p))

    # 等角緯度から測地緯度へ (Newton 法)
    e = proj.eccentricity
    e2m = 1.0 - e * e
    tau = tau_p.copy()
    for _ in range(6):
        tau_i = _conformal_tau(tau, e)
        delta = ((tau_p - tau_i) / np.sqrt(1.0 + tau_i * tau_i)
                 * (1.0 + e2m * tau * tau) / (e2m * np.sqrt(1.0 + tau * tau)))
        tau = tau + delta
        if np.all(np.abs(delta) < 1e-14):
            break

    lat = np.degrees(np.arctan(tau))
    lon = np.degrees(dlon) + proj.central_meridian

    if scalar:
        return float(lon), float(lat)
    return lon, lat
