"""NSL-KDD loading, encoding and per-device stream partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

COLUMNS = [
    "duration", "protocol_type", "service", "flag", "src_bytes", "dst_bytes",
    "land", "wrong_fragment", "urgent", "hot", "num_failed_logins",
    "logged_in", "num_compromised", "root_shell", "su_attempted",
    "num_root", "num_file_creations", "num_shells", "num_access_files",
    "num_outbound_cmds", "is_host_login", "is_guest_login", "count",
    "srv_count", "serror_rate", "srv_serror_rate", "rerror_rate",
    "srv_rerror_rate", "same_srv_rate", "diff_srv_rate",
    "srv_diff_host_rate", "dst_host_count", "dst_host_srv_count",
    "dst_host_same_srv_rate", "dst_host_diff_srv_rate",
    "dst_host_same_src_port_rate", "dst_host_srv_diff_host_rate",
    "dst_host_serror_rate", "dst_host_srv_serror_rate",
    "dst_host_rerror_rate", "dst_host_srv_rerror_rate",
]
N_FEATURES = 41
FIELDS_PER_LINE = 43
CATEGORICAL = ("protocol_type", "service", "flag")
CATEGORICAL_POS = tuple(COLUMNS.index(c) for c in CATEGORICAL)  # 1, 2, 3 (0-based)
NUMERIC_POS = tuple(i for i in range(N_FEATURES) if i not in CATEGORICAL_POS)


class DatasetError(ValueError):
    """Raised for malformed dataset input or impossible partition requests."""


class ParseError(DatasetError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        super().__init__(where + message)
        self.line = line
        self.path = path


@dataclass(frozen=True)
class RawRecord:
    features: tuple[str, ...]
    label: str
    difficulty: int = 0

    def __post_init__(self):
        if len(self.features) != N_FEATURES:
            raise DatasetError(f"expected {N_FEATURES} features, got {len(self.features)}")
        if not self.label:
            raise DatasetError("empty label")

    @property
    def is_attack(self) -> bool:
        return self.label != "normal"


def parse_line(fields: list[str], line_no: int | None = None, path: str | None = None) -> RawRecord:
    if len(fields) != FIELDS_PER_LINE:
        raise ParseError(
            f"expected {FIELDS_PER_LINE} comma-separated fields, got {len(fields)}",
            line=line_no, path=path,
        )
    fields = [f.strip() for f in fields]
    try:
        difficulty = int(fields[42])
    except ValueError:
        raise ParseError(f"non-integer difficulty {fields[42]!r}", line=line_no, path=path) from None
    if not fields[41]:
        raise ParseError("empty label", line=line_no, path=path)
    return RawRecord(tuple(fields[:41]), fields[41], difficulty)


def load_nslkdd(path) -> list[RawRecord]:
    """Read an NSL-KDD text file (KDDTrain+/KDDTest+ layout, no header).

    Raises ``FileNotFoundError`` for a missing file and :class:`ParseError`
    naming the 1-based line number for a malformed row.
    """
    path = Path(path)
    records = []
    with path.open(newline="") as fh:
        for line_no, fields in enumerate(csv.reader(fh), start=1):
            if not fields:
                raise ParseError("blank line", line=line_no, path=str(path))
            records.append(parse_line(fields, line_no, str(path)))
    return records


@dataclass(frozen=True)
class EncodingSchema:
    categorical_maps: dict[str, dict[str, int]]
    numeric_min: np.ndarray
    numeric_max: np.ndarray

    @property
    def output_dim(self) -> int:
        return len(NUMERIC_POS) + sum(len(m) for m in self.categorical_maps.values())

    @property
    def cardinalities(self) -> dict[str, int]:
        return {name: len(m) for name, m in self.categorical_maps.items()}

    def block_offset(self, column: str) -> int:
        """Start index of a categorical column's one-hot block in the encoded vector."""
        offset = len(NUMERIC_POS)
        for name in CATEGORICAL:
            if name == column:
                return offset
            offset += len(self.categorical_maps[name])
        raise KeyError(column)

    def to_dict(self) -> dict:
        return {
            "categorical_maps": self.categorical_maps,
            "numeric_min": self.numeric_min.tolist(),
            "numeric_max": self.numeric_max.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> EncodingSchema:
        return cls(
            {k: dict(v) for k, v in d["categorical_maps"].items()},
            np.asarray(d["numeric_min"], dtype=float),
            np.asarray(d["numeric_max"], dtype=float),
        )


def _numeric_matrix(records: list[RawRecord]) -> np.ndarray:
    cols = np.array([r.features for r in records], dtype=object)[:, list(NUMERIC_POS)]
    try:
        return cols.astype(float)
    except ValueError:
        pass  # fall through to locate the offending cell
    out = np.empty((len(records), len(NUMERIC_POS)), dtype=float)
    for i, r in enumerate(records):
        for j, pos in enumerate(NUMERIC_POS):
            try:
                out[i, j] = float(r.features[pos])
            except ValueError:
                raise ParseError(
                    f"non-numeric value {r.features[pos]!r} in column {COLUMNS[pos]!r} (record {i})"
                ) from None
    return out


def build_schema(train: list[RawRecord]) -> EncodingSchema:
    if not train:
        raise DatasetError("cannot build an encoding schema from an empty training set")
    maps = {}
    for name, pos in zip(CATEGORICAL, CATEGORICAL_POS):
        seen: dict[str, int] = {}
        for r in train:
            seen.setdefault(r.features[pos], len(seen))
        maps[name] = seen
    num = _numeric_matrix(train)
    return EncodingSchema(maps, num.min(axis=0), num.max(axis=0))


def encode_many(records: list[RawRecord], schema: EncodingSchema) -> tuple[np.ndarray, np.ndarray]:
    """Encode records into ``(X, y)`` arrays; the batch form of :func:`encode`."""
    n = len(records)
    X = np.zeros((n, schema.output_dim), dtype=float)
    if n:
        num = _numeric_matrix(records)
        span = schema.numeric_max - schema.numeric_min
        live = span > 0
        scaled = np.zeros_like(num)
        scaled[:, live] = (num[:, live] - schema.numeric_min[live]) / span[live]
        X[:, : len(NUMERIC_POS)] = np.clip(scaled, 0.0, 1.0)
        for name, pos in zip(CATEGORICAL, CATEGORICAL_POS):
            offset = schema.block_offset(name)
            cmap = schema.categorical_maps[name]
            for i, r in enumerate(records):
                k = cmap.get(r.features[pos])
                if k is not None:
                    X[i, offset + k] = 1.0
    y = np.fromiter((0 if r.label == "normal" else 1 for r in records), dtype=np.int64, count=n)
    return X, y


@dataclass(frozen=True, eq=False)
class EncodedRecord:
    x: np.ndarray
    y: int
    source_index: int


def encode(r: RawRecord, schema: EncodingSchema, source_index: int = 0) -> EncodedRecord:
    X, y = encode_many([r], schema)
    return EncodedRecord(X[0], int(y[0]), source_index)


def encode_records(records: list[RawRecord], schema: EncodingSchema) -> list[EncodedRecord]:
    X, y = encode_many(records, schema)
    return [EncodedRecord(X[i], int(y[i]), i) for i in range(len(records))]


def to_arrays(records: list[EncodedRecord]) -> tuple[np.ndarray, np.ndarray]:
    if not records:
        raise DatasetError("no records")
    return np.vstack([r.x for r in records]), np.array([r.y for r in records], dtype=np.int64)


class NSLKDDEncoder(TransformerMixin, BaseEstimator):
    """One-hot + min-max encoder over lists of :class:`RawRecord`.

    ``fit`` freezes the category maps and numeric ranges; ``transform``
    returns the encoded matrix. Labels are exposed through :meth:`labels`.
    """

    def fit(self, X, y=None):
        self.schema_ = build_schema(list(X))
        self.n_features_out_ = self.schema_.output_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "schema_")
        return encode_many(list(X), self.schema_)[0]

    @staticmethod
    def labels(X) -> np.ndarray:
        return np.array([0 if r.label == "normal" else 1 for r in X], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class DeviceStream:
    device_id: int
    records: tuple[EncodedRecord, ...]
    attack_fraction: float
    is_attacker: bool

    def __post_init__(self):
        if not self.records:
            raise DatasetError(f"device {self.device_id} has an empty stream")


def partition_streams(
    records: list[EncodedRecord],
    n_devices: int,
    attacker_ratio: float,
    seed: int,
    *,
    records_per_device: int = 12,
    attacker_mix: tuple[float, float] = (0.6, 1.0),
    normal_mix: tuple[float, float] = (0.0, 0.06),
    attacker_threshold: float = 0.5,
) -> list[DeviceStream]:
    """Split records into ``n_devices`` per-device streams.

    ``ceil(attacker_ratio * n_devices)`` devices take their attack fraction
    from ``attacker_mix``, the rest from ``normal_mix``; within each group the
    fractions are a stratified (jittered, evenly spaced) sample of the range,
    which keeps the group's mix stable at small device counts. Fractions
    are forced onto the right side of ``attacker_threshold`` so that the
    ground-truth role matches the construction. Records are used at most once.
    """
    if n_devices < 1:
        raise DatasetError("n_devices must be >= 1")
    if not 0.0 <= attacker_ratio <= 1.0:
        raise DatasetError("attacker_ratio must lie in [0, 1]")
    if records_per_device < 1:
        raise DatasetError("records_per_device must be >= 1")
    rng = np.random.default_rng(seed)
    L = records_per_device
    n_attackers = math.ceil(attacker_ratio * n_devices - 1e-9)
    roles = np.zeros(n_devices, dtype=bool)
    roles[rng.permutation(n_devices)[:n_attackers]] = True

    min_attack = math.ceil(attacker_threshold * L - 1e-9)  # smallest count with fraction >= threshold
    # stratified: evenly spaced quantiles of each mix range, dealt out in seeded order
    fractions = np.empty(n_devices)
    for role, (lo, hi) in ((True, attacker_mix), (False, normal_mix)):
        idx = np.flatnonzero(roles == role)
        q = (np.arange(len(idx)) + rng.uniform(0.0, 1.0, len(idx))) / max(len(idx), 1)
        fractions[idx] = lo + (hi - lo) * q[rng.permutation(len(idx))]
    n_attack = np.empty(n_devices, dtype=int)
    for d in range(n_devices):
        k = int(round(fractions[d] * L))
        if roles[d]:
            k = min(max(k, min_attack), L)
        else:
            k = max(min(k, min_attack - 1), 0)
        n_attack[d] = k

    attack_pool = [i for i, r in enumerate(records) if r.y == 1]
    normal_pool = [i for i, r in enumerate(records) if r.y == 0]
    need_attack = int(n_attack.sum())
    need_normal = n_devices * L - need_attack
    if need_attack > len(attack_pool) or need_normal > len(normal_pool):
        raise DatasetError(
            f"insufficient records: need {need_attack} attack / {need_normal} normal, "
            f"have {len(attack_pool)} attack / {len(normal_pool)} normal"
        )
    attack_order = rng.permutation(len(attack_pool))
    normal_order = rng.permutation(len(normal_pool))
    ai = ni = 0
    streams = []
    for d in range(n_devices):
        k = int(n_attack[d])
        picked = [attack_pool[j] for j in attack_order[ai : ai + k]]
        picked += [normal_pool[j] for j in normal_order[ni : ni + L - k]]
        ai += k
        ni += L - k
        picked = [picked[j] for j in rng.permutation(L)]
        recs = tuple(records[i] for i in picked)
        frac = sum(r.y for r in recs) / L
        streams.append(DeviceStream(d, recs, frac, frac >= attacker_threshold))
    return streams
