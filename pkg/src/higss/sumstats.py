"""Data model and file formats for the pipeline.

Everything observed by the pipeline enters through :class:`SummaryStats`
(the standardized statistic matrix, its diagonal scaling and the GWAS
sample size) and :class:`PathwayHierarchy` (the nested grouping of
phenotypes). All text formats are tab-delimited with 17-significant-digit
floats so write/load round trips are exact for 64-bit reals, and ids (not
row positions) are the join keys between files.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .util import FormatError, ValidationError, format_float


@dataclass(frozen=True)
class SummaryStats:
    """Standardized GWAS statistics for S SNPs x M phenotypes.

    Attributes
    ----------
    b_hat : (S, M) array
        Standardized statistics, z-scale.
    d_diag : (S,) array
        Per-SNP x'x scalings, strictly positive.
    n_samples : int
        GWAS sample size N.
    snp_ids, phenotype_ids : lists of unique identifiers.
    """

    b_hat: np.ndarray
    d_diag: np.ndarray
    n_samples: int
    snp_ids: tuple
    phenotype_ids: tuple

    def __post_init__(self):
        b = np.asarray(self.b_hat, dtype=float)
        d = np.asarray(self.d_diag, dtype=float)
        object.__setattr__(self, "b_hat", b)
        object.__setattr__(self, "d_diag", d)
        object.__setattr__(self, "snp_ids", tuple(self.snp_ids))
        object.__setattr__(self, "phenotype_ids", tuple(self.phenotype_ids))
        s, m = b.shape
        if len(self.snp_ids) != s or len(self.phenotype_ids) != m:
            raise ValidationError("id vectors do not match matrix dimensions")
        if d.shape != (s,):
            raise ValidationError("d_diag length does not match SNP count")
        if len(set(self.snp_ids)) != s:
            raise ValidationError("duplicate snp ids")
        if len(set(self.phenotype_ids)) != m:
            raise ValidationError("duplicate phenotype ids")
        if self.n_samples < 1:
            raise ValidationError("n_samples must be a positive integer")
        bad = np.where(d <= 0)[0]
        if bad.size:
            raise ValidationError(f"non-positive x'x for SNP {self.snp_ids[bad[0]]}")
        if not np.all(np.isfinite(b)):
            i, j = np.argwhere(~np.isfinite(b))[0]
            raise ValidationError(
                f"non-finite statistic at SNP {self.snp_ids[i]}, "
                f"phenotype {self.phenotype_ids[j]}"
            )
        if not np.all(np.isfinite(d)):
            raise ValidationError("non-finite entry in d_diag")

    @property
    def n_snps(self) -> int:
        return self.b_hat.shape[0]

    @property
    def n_phenotypes(self) -> int:
        return self.b_hat.shape[1]


@dataclass(frozen=True)
class PathwayHierarchy:
    """Partition of phenotypes into super-pathways and nested sub-pathways.

    Index assignment is deterministic: super-pathways are ordered
    lexicographically by id, sub-pathways lexicographically within their
    super-pathway, members lexicographically within their sub-pathway.
    """

    assignments: dict  # phenotype_id -> (super_id, sub_id)
    super_ids: tuple = field(init=False)
    sub_ids: tuple = field(init=False)  # of (super_id, sub_id), hierarchy order
    members: tuple = field(init=False)  # of tuples of phenotype ids, per sub

    def __post_init__(self):
        sub_to_super = {}
        for phen, (sup, sub) in self.assignments.items():
            if sub in sub_to_super and sub_to_super[sub] != sup:
                raise ValidationError(
                    f"sub-pathway {sub!r} appears under two super-pathways"
                )
            sub_to_super[sub] = sup
        supers = tuple(sorted({sup for sup, _ in self.assignments.values()}))
        subs = []
        members = []
        for sup in supers:
            for sub in sorted(s for s, sp in sub_to_super.items() if sp == sup):
                subs.append((sup, sub))
                members.append(
                    tuple(
                        sorted(
                            p
                            for p, (a, b) in self.assignments.items()
                            if (a, b) == (sup, sub)
                        )
                    )
                )
        object.__setattr__(self, "super_ids", supers)
        object.__setattr__(self, "sub_ids", tuple(subs))
        object.__setattr__(self, "members", tuple(members))

    @property
    def n_super(self) -> int:
        return len(self.super_ids)

    @property
    def n_sub(self) -> int:
        return len(self.sub_ids)

    @property
    def n_phenotypes(self) -> int:
        return len(self.assignments)

    def sub_counts(self) -> list:
        """Number of sub-pathways per super-pathway, hierarchy order."""
        return [sum(1 for sup, _ in self.sub_ids if sup == p) for p in self.super_ids]

    def restaurant_of_sub(self) -> np.ndarray:
        """Super-pathway index for each sub-pathway, hierarchy order."""
        lookup = {p: i for i, p in enumerate(self.super_ids)}
        return np.array([lookup[sup] for sup, _ in self.sub_ids], dtype=int)

    def column_groups(self, phenotype_ids) -> list:
        """Column indices of each sub-pathway's members in the given order."""
        col = {p: j for j, p in enumerate(phenotype_ids)}
        missing = set(self.assignments) - set(col)
        extra = set(col) - set(self.assignments)
        if missing or extra:
            raise ValidationError("hierarchy and phenotype ids do not match")
        return [np.array([col[p] for p in mem], dtype=int) for mem in self.members]


@dataclass(frozen=True)
class RunConfig:
    """Pipeline settings; loadable from a flat JSON file."""

    seed: int = 0
    # dBEMA
    dbema_alpha: float = 0.4
    dbema_beta: float = 0.1
    dbema_b: int = 500
    dbema_b_quant: int = 20
    dbema_theta_bounds: tuple = (0.1, 5.0)
    # chains
    iterations: int = 2000
    burn_in: int = 500
    thinning: int = 5
    # inference thresholds
    lfsr_threshold: float = 0.05
    fdr_q: float = 0.1
    # optional factor count override; None means estimate via dBEMA
    k_factors: int | None = None
    threads: int = 1

    def __post_init__(self):
        if not (0.0 < self.dbema_alpha < 1.0 and 0.0 < self.dbema_beta < 1.0):
            raise ValidationError("dbema alpha and beta must lie in (0,1)")
        if not (self.iterations > self.burn_in >= 0):
            raise ValidationError("iterations must exceed burn_in >= 0")
        if self.thinning < 1:
            raise ValidationError("thinning must be >= 1")

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            raw = json.load(fh)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise FormatError(f"unknown config keys: {sorted(unknown)}")
        if "dbema_theta_bounds" in raw:
            raw["dbema_theta_bounds"] = tuple(raw["dbema_theta_bounds"])
        return cls(**raw)

    def with_overrides(self, **kwargs) -> "RunConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


# ---------------------------------------------------------------------------
# Delimited matrix files


def write_matrix(path: str, values: np.ndarray, row_ids, col_ids, corner="id"):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    with open(path, "w") as fh:
        fh.write("\t".join([corner] + [str(c) for c in col_ids]) + "\n")
        for rid, row in zip(row_ids, values):
            fh.write("\t".join([str(rid)] + [format_float(v) for v in row]) + "\n")


def read_matrix(path: str):
    """Read a write_matrix file; returns (values, row_ids, col_ids)."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if len(header) < 2:
            raise FormatError(f"{path}: expected a header with id column")
        col_ids = header[1:]
        row_ids, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(header):
                raise FormatError(f"{path}:{lineno}: ragged row")
            row_ids.append(parts[0])
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return np.array(rows, dtype=float), row_ids, col_ids


def write_vector(path: str, values: np.ndarray, ids, name: str):
    with open(path, "w") as fh:
        fh.write(f"id\t{name}\n")
        for rid, v in zip(ids, np.asarray(values, dtype=float)):
            fh.write(f"{rid}\t{format_float(v)}\n")


def read_vector(path: str):
    with open(path) as fh:
        fh.readline()
        ids, vals = [], []
        for line in fh:
            rid, v = line.rstrip("\n").split("\t")
            ids.append(rid)
            vals.append(float(v))
    return np.array(vals), ids


# ---------------------------------------------------------------------------
# Summary statistics


def write_summary_stats(dir_path: str, stats: SummaryStats):
    """Write the matrix file, the D sidecar and the sample size."""
    os.makedirs(dir_path, exist_ok=True)
    write_matrix(
        os.path.join(dir_path, "b_hat.tsv"),
        stats.b_hat,
        stats.snp_ids,
        stats.phenotype_ids,
        corner="snp_id",
    )
    write_vector(
        os.path.join(dir_path, "d_diag.tsv"), stats.d_diag, stats.snp_ids, "xtx"
    )
    with open(os.path.join(dir_path, "n_samples.txt"), "w") as fh:
        fh.write(f"{stats.n_samples}\n")


def load_summary_stats(path_matrix: str, path_d: str, n_samples: int) -> SummaryStats:
    """Load and validate summary statistics; D entries are matched by snp id."""
    b_hat, snp_ids, phen_ids = read_matrix(path_matrix)
    if len(set(snp_ids)) != len(snp_ids):
        raise FormatError(f"{path_matrix}: duplicate snp ids")
    if len(set(phen_ids)) != len(phen_ids):
        raise FormatError(f"{path_matrix}: duplicate phenotype ids")
    d_vals, d_ids = read_vector(path_d)
    lookup = dict(zip(d_ids, d_vals))
    if len(lookup) != len(d_ids):
        raise FormatError(f"{path_d}: duplicate snp ids")
    missing = [s for s in snp_ids if s not in lookup]
    if missing:
        raise FormatError(f"{path_d}: no x'x entry for SNP {missing[0]}")
    d_diag = np.array([lookup[s] for s in snp_ids])
    return SummaryStats(b_hat, d_diag, int(n_samples), snp_ids, phen_ids)


def load_summary_stats_dir(dir_path: str) -> SummaryStats:
    with open(os.path.join(dir_path, "n_samples.txt")) as fh:
        n = int(fh.read().strip())
    return load_summary_stats(
        os.path.join(dir_path, "b_hat.tsv"), os.path.join(dir_path, "d_diag.tsv"), n
    )


# ---------------------------------------------------------------------------
# Pathways


def write_pathways(path: str, hierarchy: PathwayHierarchy):
    with open(path, "w") as fh:
        fh.write("phenotype_id\tsub_pathway\tsuper_pathway\n")
        for (sup, sub), mem in zip(hierarchy.sub_ids, hierarchy.members):
            for p in mem:
                fh.write(f"{p}\t{sub}\t{sup}\n")


def load_pathways(path: str) -> PathwayHierarchy:
    """Read the three-column pathway file into a validated hierarchy."""
    assignments = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if len(header) != 3:
            raise FormatError(f"{path}: expected 3 tab-delimited columns")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 columns")
            phen, sub, sup = parts
            if phen in assignments:
                raise ValidationError(f"phenotype {phen!r} listed twice")
            assignments[phen] = (sup, sub)
    return PathwayHierarchy(assignments)


# ---------------------------------------------------------------------------
# Results directory + manifest


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(dir_path: str, entries: dict, hash_files: bool = True) -> str:
    """Write manifest.txt: sorted key=value lines plus per-file sha256 hashes."""
    lines = {str(k): str(v) for k, v in entries.items()}
    if hash_files:
        for name in sorted(os.listdir(dir_path)):
            full = os.path.join(dir_path, name)
            if name == "manifest.txt" or not os.path.isfile(full):
                continue
            lines[f"sha256.{name}"] = sha256_file(full)
    path = os.path.join(dir_path, "manifest.txt")
    with open(path, "w") as fh:
        for k in sorted(lines):
            fh.write(f"{k}={lines[k]}\n")
    return path


def read_manifest(dir_path: str) -> dict:
    out = {}
    with open(os.path.join(dir_path, "manifest.txt")) as fh:
        for line in fh:
            k, _, v = line.rstrip("\n").partition("=")
            out[k] = v
    return out


def write_results(dir_path: str, artifacts: dict, config_entries: dict | None = None):
    """Persist named artifacts and a manifest recording config and hashes.

    ``artifacts`` maps file stems to (values, row_ids, col_ids) matrix
    triples, (values, ids, name) vector triples, or plain strings.
    Raises on I/O failure; never silently truncates.
    """
    os.makedirs(dir_path, exist_ok=True)
    for stem, art in artifacts.items():
        path = os.path.join(dir_path, f"{stem}.tsv")
        if isinstance(art, str):
            with open(os.path.join(dir_path, stem), "w") as fh:
                fh.write(art)
        elif len(art) == 3 and isinstance(art[2], str):
            write_vector(path, art[0], art[1], art[2])
        else:
            values, row_ids, col_ids = art
            write_matrix(path, values, row_ids, col_ids)
    return write_manifest(dir_path, config_entries or {})
