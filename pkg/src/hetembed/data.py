"""Dataset schema, CSV ingestion, sample assembly, splitting and a synthetic generator."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

# first-level ATC codes
ATC_CLASSES: tuple[str, ...] = ("A", "B", "C", "D", "G", "H", "J", "L", "M", "N", "P", "R", "S", "V")


class DataError(ValueError):
    """Base class for ingestion and assembly failures."""


class FeatureFileNotFound(DataError, FileNotFoundError):
    pass


class RaggedRowError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class NonNumericCellError(DataError):
    pass


class NonFiniteValueError(DataError):
    pass


class MissingDomainError(DataError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    id: int
    name: str
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"domain {self.name!r}: dim must be >= 1, got {self.dim}")


def check_specs(specs: Sequence[DomainSpec]) -> None:
    ids = sorted(s.id for s in specs)
    if ids != list(range(len(specs))):
        raise ValueError(f"domain ids must be 0..k-1 and unique, got {ids}")


@dataclass
class CompoundRecord:
    id: str
    features: dict[int, np.ndarray]
    label: Optional[np.ndarray] = None
    compound: str = ""

    def __post_init__(self):
        if not self.compound:
            self.compound = compound_of(self.id)


@dataclass
class Dataset:
    specs: list[DomainSpec]
    records: list[CompoundRecord]
    label_names: tuple[str, ...] = ATC_CLASSES
    meta: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.records)

    @property
    def q(self) -> int:
        return len(self.label_names)

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def features(self, domain_id: int) -> np.ndarray:
        """Stacked ``(m, dim)`` matrix for one domain."""
        dim = self.spec(domain_id).dim
        if not self.records:
            return np.zeros((0, dim))
        return np.stack([r.features[domain_id] for r in self.records])

    def labels(self) -> np.ndarray:
        if any(r.label is None for r in self.records):
            raise DataError("dataset has unlabeled records")
        if not self.records:
            return np.zeros((0, self.q), dtype=np.int8)
        return np.stack([r.label for r in self.records]).astype(np.int8)

    @property
    def labeled(self) -> bool:
        return all(r.label is not None for r in self.records)

    def spec(self, domain_id: int) -> DomainSpec:
        for s in self.specs:
            if s.id == domain_id:
                return s
        raise KeyError(domain_id)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(self.specs, [self.records[i] for i in indices], self.label_names, dict(self.meta))


def compound_of(sample_id: str) -> str:
    """``"A:3"`` -> ``"A"``; ids without a numeric sample suffix map to themselves."""
    head, sep, tail = sample_id.rpartition(":")
    if sep and tail.isdigit() and head:
        return head
    return sample_id


# ------------------------------------------------------------------ CSV I/O


def _read_rows(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    if not path.is_file():
        raise FeatureFileNotFound(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        rows = [(reader.line_num, row) for row in reader if row]
    return header, rows


def _parse_numeric(path: Path, header: list[str], rows) -> dict[str, np.ndarray]:
    width = len(header)
    out: dict[str, np.ndarray] = {}
    for line, row in rows:
        if len(row) != width:
            raise RaggedRowError(f"{path}: row {line} has {len(row)} cells, header has {width}")
        values = np.empty(width - 1)
        for col, cell in enumerate(row[1:], start=1):
            try:
                v = float(cell)
            except ValueError:
                raise NonNumericCellError(
                    f"{path}: row {line}, column {col} ({header[col]!r}): non-numeric cell {cell!r}"
                ) from None
            if not math.isfinite(v):
                raise NonFiniteValueError(f"{path}: row {line}, column {col} ({header[col]!r}): non-finite value {cell!r}")
            values[col - 1] = v
        key = row[0]
        if key in out:
            raise DataError(f"{path}: row {line}: duplicate id {key!r}")
        out[key] = values
    return out


def load_domain_csv(path, spec: DomainSpec) -> dict[str, np.ndarray]:
    """Read one feature source: header ``id,f0,f1,...``, one row per sample."""
    path = Path(path)
    header, rows = _read_rows(path)
    if len(header) != spec.dim + 1:
        raise DimensionMismatchError(
            f"{path}: header has {len(header) - 1} feature columns, domain {spec.name!r} declares {spec.dim}"
        )
    return _parse_numeric(path, header, rows)


def load_labels_csv(path, label_names: Sequence[str] = ATC_CLASSES) -> dict[str, np.ndarray]:
    path = Path(path)
    header, rows = _read_rows(path)
    if tuple(header[1:]) != tuple(label_names):
        raise DimensionMismatchError(f"{path}: label columns {header[1:]} do not match {list(label_names)}")
    parsed = _parse_numeric(path, header, rows)
    for key, bits in parsed.items():
        if not np.isin(bits, (0.0, 1.0)).all():
            raise DataError(f"{path}: id {key!r}: label cells must be 0 or 1")
    return {k: v.astype(np.int8) for k, v in parsed.items()}


def load_score_csv(path) -> tuple[tuple[str, ...], dict[str, np.ndarray]]:
    """Read ``id,<label>,<label>,...`` with any numeric cells; returns (label names, rows)."""
    path = Path(path)
    header, rows = _read_rows(path)
    if len(header) < 2:
        raise DimensionMismatchError(f"{path}: expected an id column and at least one label column")
    return tuple(header[1:]), _parse_numeric(path, header, rows)


def write_domain_csv(path, vectors: Mapping[str, np.ndarray], dim: int) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"f{i}" for i in range(dim)])
        for key, vec in vectors.items():
            w.writerow([key] + [repr(float(v)) for v in vec])


def write_labels_csv(path, labels: Mapping[str, np.ndarray], label_names: Sequence[str] = ATC_CLASSES) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *label_names])
        for key, bits in labels.items():
            w.writerow([key] + [int(b) for b in bits])


def write_dataset(ds: Dataset, directory, prefix: str = "") -> dict[str, str]:
    """Write one CSV per domain plus a labels CSV (compound-level, if labeled)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for spec in ds.specs:
        p = directory / f"{prefix}{spec.name}.csv"
        write_domain_csv(p, {r.id: r.features[spec.id] for r in ds.records}, spec.dim)
        files[spec.name] = str(p)
    if ds.records and ds.labeled:
        p = directory / f"{prefix}labels.csv"
        write_labels_csv(p, {r.id: r.label for r in ds.records}, ds.label_names)
        files["labels"] = str(p)
    return files


# ----------------------------------------------------------------- assembly


def assemble_dataset(
    per_domain: Sequence[Mapping[str, np.ndarray]],
    specs: Sequence[DomainSpec],
    labels: Optional[Mapping[str, np.ndarray]] = None,
    replicate_on: Optional[int] = None,
    impute: bool = False,
    label_names: Sequence[str] = ATC_CLASSES,
) -> Dataset:
    """Join per-domain vectors into records.

    With ``replicate_on`` set, that domain drives the join: each of its samples
    (keys like ``"A:0"``, ``"A:1"``) becomes a record, and every other domain's
    single vector for compound ``A`` is copied into it. Otherwise ids are joined
    exactly. A compound missing from some domain is an error unless ``impute`` is
    set, in which case that domain's mean vector fills the gap. Disjoint domains
    give an empty dataset.
    """
    specs = list(specs)
    check_specs(specs)
    if len(per_domain) != len(specs):
        raise ValueError(f"got {len(per_domain)} domain maps for {len(specs)} specs")
    by_id = {s.id: (s, per_domain[i]) for i, s in enumerate(specs)}
    driver = replicate_on if replicate_on is not None else specs[0].id
    if driver not in by_id:
        raise ValueError(f"replicate_on={driver} is not a declared domain")

    def keys_of(domain_id: int) -> set[str]:
        vectors = by_id[domain_id][1]
        if domain_id == driver:
            return {compound_of(k) if replicate_on is not None else k for k in vectors}
        return set(vectors)

    for spec, vectors in by_id.values():
        for key, vec in vectors.items():
            if len(vec) != spec.dim:
                raise DimensionMismatchError(f"domain {spec.name!r}, id {key!r}: length {len(vec)} != dim {spec.dim}")

    key_sets = {d: keys_of(d) for d in by_id}
    common = set.intersection(*key_sets.values())
    union = set.union(*key_sets.values())
    if not common:
        if union:
            log.warning("no id is present in every domain; returning an empty dataset")
        return Dataset(specs, [], tuple(label_names))
    if union != common and not impute:
        missing = {by_id[d][0].name: sorted(union - ks) for d, ks in key_sets.items() if union - ks}
        raise MissingDomainError(f"missing domain for ids: {missing}")

    means = {d: np.mean(np.stack(list(v.values())), axis=0) for d, (_, v) in by_id.items()}
    driver_vectors = by_id[driver][1]
    records = []
    for key, vec in driver_vectors.items():
        compound = compound_of(key) if replicate_on is not None else key
        feats = {driver: np.asarray(vec, dtype=np.float64)}
        for d, (_, vectors) in by_id.items():
            if d == driver:
                continue
            other = vectors.get(compound)
            feats[d] = np.asarray(other if other is not None else means[d], dtype=np.float64)
        label = None
        if labels is not None:
            if compound not in labels:
                raise MissingDomainError(f"missing label for compound {compound!r}")
            label = np.asarray(labels[compound], dtype=np.int8)
        records.append(CompoundRecord(key, feats, label, compound))
    return Dataset(specs, records, tuple(label_names))


# -------------------------------------------------------------------- split


def split(
    ds: Dataset,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    group_by_compound: bool = True,
) -> tuple[Dataset, Dataset, Dataset]:
    """Seeded train/val/test holdout.

    Grouped splitting keeps every replicate of a compound in one split, so the
    realised sizes can drift from ``fractions`` by up to one group.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three positive numbers summing to 1, got {tuple(fractions)}")
    if ds.m < 3:
        raise ValueError(f"need at least 3 records to split, got {ds.m}")
    rng = np.random.default_rng(seed)
    if group_by_compound:
        groups: dict[str, list[int]] = {}
        for i, r in enumerate(ds.records):
            groups.setdefault(r.compound, []).append(i)
        units = list(groups.values())
    else:
        units = [[i] for i in range(ds.m)]
    if len(units) < 3:
        raise ValueError(f"need at least 3 compounds to split, got {len(units)}")
    order = rng.permutation(len(units))
    targets = _split_sizes(ds.m, fractions)
    parts: list[list[int]] = [[], [], []]
    # fill test, then val; the rest is train
    cursor = 0
    for part in (2, 1):
        while len(parts[part]) < targets[part] and cursor < len(order) - (2 if part == 2 else 1):
            parts[part].extend(units[order[cursor]])
            cursor += 1
    for u in order[cursor:]:
        parts[0].extend(units[u])
    return tuple(ds.subset(sorted(p)) for p in parts)  # type: ignore[return-value]


def _split_sizes(m: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    n_val = max(1, round(m * fractions[1]))
    n_test = max(1, round(m * fractions[2]))
    n_train = m - n_val - n_test
    if n_train < 1:
        n_train, n_val, n_test = 1, max(1, n_val - 1), m - 1 - max(1, n_val - 1)
    return n_train, n_val, n_test


def split_checksum(*parts: Dataset) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update("\x1e".join(p.ids()).encode())
        h.update(b"\x1d")
    return h.hexdigest()[:16]


# ----------------------------------------------------------- standardization


@dataclass
class Standardizer:
    """Per-feature z-scoring; statistics come from the training split only."""

    means: dict[int, np.ndarray]
    stds: dict[int, np.ndarray]

    @classmethod
    def fit(cls, ds: Dataset) -> "Standardizer":
        if ds.m == 0:
            raise DataError("cannot fit standardization on an empty dataset")
        means, stds = {}, {}
        for s in ds.specs:
            x = ds.features(s.id)
            means[s.id] = x.mean(axis=0)
            sd = x.std(axis=0)
            stds[s.id] = np.where(sd > 1e-12, sd, 1.0)
        return cls(means, stds)

    @classmethod
    def identity(cls, specs: Sequence[DomainSpec]) -> "Standardizer":
        return cls({s.id: np.zeros(s.dim) for s in specs}, {s.id: np.ones(s.dim) for s in specs})

    def apply(self, ds: Dataset) -> Dataset:
        records = [
            replace(r, features={d: (v - self.means[d]) / self.stds[d] for d, v in r.features.items()})
            for r in ds.records
        ]
        return Dataset(ds.specs, records, ds.label_names, dict(ds.meta))


# ---------------------------------------------------------------- synthetic


@dataclass
class SynthTruth:
    """Latent quantities behind a synthetic dataset (for diagnostics and tests)."""

    z: np.ndarray  # (m, q) planted labels
    shared: np.ndarray  # (m, r) cross-domain latent
    clean: list[np.ndarray]  # per-domain g_j(z, v_j) before signature and noise
    conditional_mean: list[np.ndarray]  # per-domain E[x_j | z]
    seed: int


def synth_generate(
    k: int = 3,
    dims: Sequence[int] = (48, 64, 80),
    q: int = 14,
    m: int = 600,
    dependency: float = 0.8,
    seed: int = 0,
    **options,
) -> Dataset:
    """Synthetic multi-domain dataset whose labels cause every domain.

    See :func:`synth_generate_with_truth` for the construction and ``options``.
    """
    return synth_generate_with_truth(k, dims, q, m, dependency, seed, **options)[0]


def synth_generate_with_truth(
    k: int = 3,
    dims: Sequence[int] = (48, 64, 80),
    q: int = 14,
    m: int = 600,
    dependency: float = 0.8,
    seed: int = 0,
    signature: float = 1.0,
    noise: float = 0.3,
    linear: bool = False,
    hidden: int = 24,
    latent_dim: int = 4,
    gate_gain: float = 2.0,
    gate_bias: float = 0.5,
) -> tuple[Dataset, SynthTruth]:
    """Generate records ``x_j = g_j(z, v_j) + s_j + noise``.

    ``z`` holds 1-3 active labels per record. Domain ``j`` sees the latent
    ``v_j = dependency * u + sqrt(1 - dependency**2) * w_j`` where ``u`` is shared
    by all domains of a record and ``w_j`` is private, so ``dependency=0`` makes
    domains conditionally independent given ``z``. The map is

        g_j(z, v) = A_j [tanh(B_j z + c_j) * tanh(gate_gain * C_j v + gate_bias)]

    a tanh layer over the labels whose units are gated by the latent; ``A_j`` has
    smooth random columns so neighbouring features co-vary. The gate can flip the
    sign of a label's effect, which defeats linear read-out, and with
    ``dependency > 0`` the other domains carry information about it.

    The signature ``s_j`` is a sinusoid with a domain-specific period and a random
    phase per record (so it survives per-feature centring). ``linear=True``
    replaces ``g_j`` with ``A_j B_j z``.

    For ``m >= 200`` a draw in which some label never occurs is discarded and the
    generator retries with ``seed + 1`` (recorded in ``meta["effective_seed"]``).
    """
    if len(dims) != k:
        raise ValueError(f"dims has {len(dims)} entries for k={k}")
    if m < 1 or q < 1 or k < 1:
        raise ValueError("k, q and m must be positive")
    if not 0.0 <= dependency <= 1.0:
        raise ValueError(f"dependency must lie in [0, 1], got {dependency}")
    params = dict(
        signature=signature,
        noise=noise,
        linear=linear,
        hidden=hidden,
        latent_dim=latent_dim,
        gate_gain=gate_gain,
        gate_bias=gate_bias,
    )
    effective = seed
    while True:
        ds, truth = _synthesize(k, list(dims), q, m, dependency, effective, **params)
        if m < 200 or truth.z.sum(axis=0).min() > 0:
            break
        effective += 1
    ds.meta.update(generator="synth", seed=seed, effective_seed=effective, dependency=dependency, **params)
    return ds, truth


def _smooth_profiles(rng: np.random.Generator, dim: int, hidden: int) -> np.ndarray:
    width = max(1.0, dim / 24)
    half = 3 * int(math.ceil(width))
    t = np.arange(-half, half + 1)
    kernel = np.exp(-0.5 * (t / width) ** 2)
    raw = rng.standard_normal((hidden, dim + len(t) - 1))
    prof = np.stack([np.convolve(r, kernel, mode="valid") for r in raw])
    prof /= prof.std(axis=1, keepdims=True)
    return prof.T / math.sqrt(hidden)  # (dim, hidden)


def _gate_mean(gain_scale: np.ndarray, bias: float) -> np.ndarray:
    """E[tanh(s + bias)] for s ~ N(0, gain_scale**2), by Gauss-Hermite quadrature."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(64)
    weights = weights / weights.sum()
    return (np.tanh(np.outer(gain_scale, nodes) + bias) * weights).sum(axis=1)


def _synthesize(k, dims, q, m, dependency, seed, *, signature, noise, linear, hidden, latent_dim, gate_gain, gate_bias):
    rng = np.random.default_rng(seed)
    periods = [3.0 + 2.0 * j for j in range(k)]
    maps = []
    for j in range(k):
        a = _smooth_profiles(rng, dims[j], hidden)
        b = rng.standard_normal((hidden, q)) * 2.0
        c = rng.standard_normal(hidden)
        gate = rng.standard_normal((hidden, latent_dim))
        maps.append((a, b, c, gate))

    z = np.zeros((m, q), dtype=np.int8)
    for i in range(m):
        n_active = rng.integers(1, min(3, q) + 1)
        z[i, rng.choice(q, size=n_active, replace=False)] = 1
    zf = z.astype(np.float64)
    u = rng.standard_normal((m, latent_dim))
    private_scale = math.sqrt(max(0.0, 1.0 - dependency**2))

    clean, cond_mean, domains = [], [], []
    for j in range(k):
        a, b, c, gate = maps[j]
        v = dependency * u + private_scale * rng.standard_normal((m, latent_dim))
        if linear:
            g = zf @ b.T @ a.T
            g_mean = g
        else:
            units = np.tanh(zf @ b.T + c)
            g = (units * np.tanh(gate_gain * v @ gate.T + gate_bias)) @ a.T
            # each component of v is standard normal
            mean_gate = _gate_mean(gate_gain * np.linalg.norm(gate, axis=1), gate_bias)
            g_mean = (units * mean_gate) @ a.T
        phase = rng.uniform(0, 2 * math.pi, size=(m, 1))
        pos = np.arange(dims[j])[None, :]
        sig = signature * np.sin(2 * math.pi * pos / periods[j] + phase)
        x = g + sig + noise * rng.standard_normal((m, dims[j]))
        clean.append(g)
        cond_mean.append(g_mean)
        domains.append(x)

    specs = [DomainSpec(j, f"domain{j}", dims[j]) for j in range(k)]
    names = ATC_CLASSES if q == len(ATC_CLASSES) else tuple(f"L{i}" for i in range(q))
    records = [CompoundRecord(f"c{i:05d}", {j: domains[j][i] for j in range(k)}, z[i].copy()) for i in range(m)]
    ds = Dataset(specs, records, names)
    return ds, SynthTruth(z, u, clean, cond_mean, seed)
