"""
バイナリコンテナモジュール
グリッドとチェックポイントを「JSON ヘッダ + 行優先リトルエンディアン配列」形式で保存

ファイル構造:
    b"GTWC1\\n"                    マジック
    8 バイト (little-endian uint64)  ヘッダ長
    UTF-8 JSON ヘッダ               {"meta": {...}, "arrays": [{name, dtype, shape, offset, nbytes}]}
    配列データ                      ヘッダ記載順に連結 (C 順序)
"""

import json
import os
import struct
from typing import Any, Dict, Mapping, Tuple

import numpy as np


MAGIC = b"GTWC1\n"

_CANONICAL_DTYPES = {
    "i": "<i8",
    "u": "<i8",
    "b": "<i8",
    "f": "<f8",
}


def _canonical(array: np.ndarray) -> np.ndarray:
    kind = np.asarray(array).dtype.kind
    if kind not in _CANONICAL_DTYPES:
        raise ValueError(f"保存できない配列型です: {np.asarray(array).dtype}")
    return np.ascontiguousarray(array, dtype=np.dtype(_CANONICAL_DTYPES[kind]))


def atomic_write_bytes(path: str, payload: bytes):
    """一時ファイルに書いてから置き換える"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    try:
        with open(tmp_path, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    finally:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)


def atomic_write_text(path: str, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_container(path: str, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]):
    """
    コンテナを書き出す

    Args:
        path: 出力パス
        meta: JSON 化可能なメタデータ
        arrays: 名前 -> 配列 (挿入順で保存)
    """
    entries = []
    blobs = []
    offset = 0
    for name, array in arrays.items():
        data = _canonical(array)
        raw = data.tobytes(order="C")
        entries.append({
            "name": name,
            "dtype": data.dtype.str,
            "shape": list(data.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)

    header = json.dumps({"meta": meta, "arrays": entries},
                        ensure_ascii=False, sort_keys=True).encode("utf-8")
    payload = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)
    atomic_write_bytes(path, payload)


def read_container(path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """
    コンテナを読み込む

    Returns:
        (meta, arrays)
    """
    with open(path, "rb") as f:
        payload = f.read()

    if not payload.startswith(MAGIC):
        raise ValueError(f"コンテナ形式ではありません: {path}")

    start = len(MAGIC)
    (header_len,) = struct.unpack("<Q", payload[start:start + 8])
    header_start = start + 8
    header = json.loads(payload[header_start:header_start + header_len].decode("utf-8"))
    data_start = header_start + header_len

    arrays: Dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        begin = data_start + entry["offset"]
        raw = payload[begin:begin + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise ValueError(f"コンテナが途中で切れています: {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header["meta"], arrays
