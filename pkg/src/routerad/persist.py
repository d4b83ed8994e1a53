"""Binary model file.

Layout (all integers little-endian)::

    magic     8 bytes  b"RTADMODL"
    version   u32
    count     u32      number of sections
    table     count x (name: 8 ASCII bytes, NUL padded; offset: u64; length: u64)
    payloads  concatenated section bytes
    checksum  32 bytes SHA-256 of everything above

Sections: ``meta`` (UTF-8 JSON: schema, configs, shapes, training metadata),
``vocab`` (UTF-8 JSON), and ``scaler``, ``pca``, ``svm`` holding float64
arrays as raw little-endian bytes in the order documented in ``_ARRAYS``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from .detector import DetectorModel, SvmConfig, schema_fingerprint
from .errors import ChecksumError, ModelFormatError, ModelInvariantError, VersionError
from .features import FeatureConfig, FeatureSet, ScalerStats, Vocabulary, column_from_name
from .reduction import PcaModel, check_pca

MAGIC = b"RTADMODL"
VERSION = 1
_HEAD = struct.Struct("<8sII")
_ENTRY = struct.Struct("<8sQQ")
_DIGEST = 32

# section -> ordered (field, shape key) pairs
_ARRAYS = {
    "scaler": [("mean", "p"), ("std", "p")],
    "pca": [("mean", "p"), ("components", "kp"), ("explained_variance", "k"),
            ("explained_ratio", "k"), ("spectrum_ratio", "s")],
    "svm": [("support_vectors", "mk"), ("alpha", "m"), ("rho", "1")],
}


def _f8(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def model_to_bytes(model: DetectorModel) -> bytes:
    pca = model.pca
    cfg = model.config
    fc = model.feature_config
    meta = {
        "columns": [c.name for c in model.columns],
        "fingerprint": model.fingerprint,
        "feature_config": {"window_L": fc.window_L, "ngram_n": fc.ngram_n, "bin_m": fc.bin_m,
                           "feature_set": fc.feature_set.value,
                           "label_min_events": fc.label_min_events},
        "svm_config": {"nu": cfg.nu, "kernel": cfg.kernel, "gamma": cfg.gamma,
                       "tol": cfg.tol, "max_iter": cfg.max_iter},
        "gamma": model.gamma,
        "pca": {"variance_target": pca.variance_target, "degenerate": pca.degenerate},
        "shapes": {"p": pca.p, "k": pca.k, "s": int(pca.spectrum_ratio.size),
                   "m": int(model.alpha.size)},
        "training": model.metadata,
    }
    sections = {
        "meta": json.dumps(meta, sort_keys=True).encode("utf-8"),
        "vocab": json.dumps(model.vocabulary.to_json() if model.vocabulary else None,
                            sort_keys=True).encode("utf-8"),
        "scaler": _f8(model.scaler.mean) + _f8(model.scaler.std),
        "pca": b"".join(_f8(getattr(pca, name)) for name, _ in _ARRAYS["pca"]),
        "svm": _f8(model.support_vectors) + _f8(model.alpha) + _f8([model.rho]),
    }
    offset = _HEAD.size + _ENTRY.size * len(sections)
    table, payload = [], []
    for name, data in sections.items():
        table.append(_ENTRY.pack(name.encode("ascii"), offset, len(data)))
        payload.append(data)
        offset += len(data)
    body = _HEAD.pack(MAGIC, VERSION, len(sections)) + b"".join(table) + b"".join(payload)
    return body + hashlib.sha256(body).digest()


def _split_arrays(data: bytes, section: str, shapes: dict[str, int]) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, key in _ARRAYS[section]:
        dims = tuple(1 if ch == "1" else shapes[ch] for ch in key)
        n = int(np.prod(dims)) * 8
        if pos + n > len(data):
            raise ModelFormatError(f"section {section!r} is too short")
        out[name] = np.frombuffer(data[pos:pos + n], dtype="<f8").astype(float).reshape(dims)
        pos += n
    if pos != len(data):
        raise ModelFormatError(f"section {section!r} has trailing bytes")
    return out


def model_from_bytes(blob: bytes) -> DetectorModel:
    if len(blob) < _HEAD.size + _DIGEST:
        raise ChecksumError("model file is truncated")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("model checksum mismatch (file corrupt or truncated)")
    magic, version, count = _HEAD.unpack_from(body)
    if magic != MAGIC:
        raise ModelFormatError("not a routerad model file")
    if version != VERSION:
        raise VersionError(f"model format version {version}, expected {VERSION}")
    sections = {}
    for i in range(count):
        name, off, length = _ENTRY.unpack_from(body, _HEAD.size + i * _ENTRY.size)
        if off + length > len(body):
            raise ModelFormatError("section table points past end of file")
        sections[name.rstrip(b"\0").decode("ascii")] = body[off:off + length]
    missing = {"meta", "vocab", "scaler", "pca", "svm"} - sections.keys()
    if missing:
        raise ModelFormatError("missing sections: " + ", ".join(sorted(missing)))
    try:
        meta = json.loads(sections["meta"])
        vocab_doc = json.loads(sections["vocab"])
        shapes = meta["shapes"]
        columns = tuple(column_from_name(n) for n in meta["columns"])
        fc = meta["feature_config"]
        feature_config = FeatureConfig(fc["window_L"], fc["ngram_n"], fc["bin_m"],
                                       FeatureSet(fc["feature_set"]), fc["label_min_events"])
        config = SvmConfig(**meta["svm_config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"unreadable metadata ({exc})") from None
    sc = _split_arrays(sections["scaler"], "scaler", shapes)
    pc = _split_arrays(sections["pca"], "pca", shapes)
    sv = _split_arrays(sections["svm"], "svm", shapes)
    pca = PcaModel(pc["mean"], pc["components"], pc["explained_variance"], pc["explained_ratio"],
                   pc["spectrum_ratio"], meta["pca"]["variance_target"], meta["pca"]["degenerate"])
    model = DetectorModel(columns, feature_config,
                          Vocabulary.from_json(vocab_doc) if vocab_doc else None,
                          ScalerStats(sc["mean"], sc["std"]), pca, sv["support_vectors"],
                          sv["alpha"], float(sv["rho"][0]), float(meta["gamma"]), config,
                          meta["training"])
    if meta["fingerprint"] != schema_fingerprint(columns):
        raise ModelInvariantError("schema fingerprint does not match columns")
    problems = check_model(model)
    if problems:
        raise ModelInvariantError("; ".join(problems))
    return model


def check_model(model: DetectorModel) -> list[str]:
    """Invariant violations of a detector model (empty when sound)."""
    problems = list(check_pca(model.pca))
    a = model.alpha
    try:
        cap = 1.0 / (model.config.nu * model.n_train)
    except (KeyError, ZeroDivisionError):
        return problems + ["training row count missing"]
    if a.size == 0 or np.any(a <= 0):
        problems.append("support vectors must have alpha > 0")
    if np.any(a > cap * (1 + 1e-12)):
        problems.append("alpha exceeds 1/(nu*l)")
    if abs(a.sum() - 1.0) > 1e-9:
        problems.append(f"alphas sum to {a.sum():.12g}, expected 1")
    if model.support_vectors.shape != (a.size, model.pca.k):
        problems.append("support vector shape mismatch")
    if model.scaler.mean.shape != (len(model.columns),) or model.pca.p != len(model.columns):
        problems.append("scaler/PCA width differs from schema")
    if not (np.isfinite(model.rho) and model.gamma > 0):
        problems.append("rho must be finite and gamma positive")
    return problems


def save_model(model: DetectorModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path: str | os.PathLike) -> DetectorModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())


def is_model_file(path: str | os.PathLike) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(MAGIC)) == MAGIC
