"""Method tags, experiment report records, and paper-style result tables."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .core import ConfigError, InputError, LossWeights

# tag -> (pretext, uses ssl, uses ent, uses vat)
METHODS: dict[str, tuple[str, bool, bool, bool]] = {
    "s+t": ("rotation", False, False, False),
    "ent": ("rotation", False, True, False),
    "vat": ("rotation", False, False, True),
    "ent+vat": ("rotation", False, True, True),
    "rot": ("rotation", True, False, False),
    "rot+ent": ("rotation", True, True, False),
    "rot+vat": ("rotation", True, False, True),
    "rot+ent+vat": ("rotation", True, True, True),
    "jig": ("jigsaw", True, False, False),
    "jig+ent": ("jigsaw", True, True, False),
}
ARCH_LAMBDA_ENT = {"small": 0.01, "large": 0.1}


def method_weights(tag: str, mode: str = "ssda", arch: str = "small", lambda_ssl: Optional[float] = None,
                   lambda_ent: Optional[float] = None, lambda_vat: Optional[float] = None):
    """Loss weights and pretext kind for a method tag.

    SSDA: lambda_s = lambda_t = lambda_ssl = 1, lambda_ent per arch (0.01
    small, 0.1 large), lambda_vat = 0.01. UDA: lambda_t = 0, lambda_s = 0.5,
    lambda_ent = lambda_vat = 0.01. Terms the tag does not use are 0; the
    explicit overrides only apply to terms the tag uses.
    """
    key = tag.lower()
    if key not in METHODS:
        raise ConfigError(f"unknown method tag {tag!r}; known: {sorted(METHODS)}")
    if mode not in ("ssda", "uda"):
        raise ConfigError(f"mode must be ssda or uda, got {mode!r}")
    if arch not in ARCH_LAMBDA_ENT:
        raise ConfigError(f"arch preset must be one of {sorted(ARCH_LAMBDA_ENT)}, got {arch!r}")
    pretext, ssl, ent, vat = METHODS[key]
    if mode == "ssda":
        lam_s, lam_t, ent_default = 1.0, 1.0, ARCH_LAMBDA_ENT[arch]
    else:
        lam_s, lam_t, ent_default = 0.5, 0.0, 0.01
    weights = LossWeights(
        lambda_s=lam_s, lambda_t=lam_t,
        lambda_ssl=(1.0 if lambda_ssl is None else lambda_ssl) if ssl else 0.0,
        lambda_ent=(ent_default if lambda_ent is None else lambda_ent) if ent else 0.0,
        lambda_vat=(0.01 if lambda_vat is None else lambda_vat) if vat else 0.0,
    )
    return weights, pretext


def display_tag(tag: str, distilled: bool = False) -> str:
    name = "S+T" if tag.lower() == "s+t" else tag.upper()
    return f"KD({name})" if distilled else name


def degradation(acc_standard: float, acc_uncurated: float) -> float:
    """Signed percent change from standard to un-curated accuracy."""
    if not acc_standard > 0:
        raise InputError("standard accuracy must be > 0")
    return 100.0 * (acc_uncurated - acc_standard) / acc_standard


@dataclass
class ExperimentReport:
    method: str
    data: str  # standard | uncurated
    accuracies: dict[str, float]  # pair name -> accuracy (percent)
    seeds: list[int] = field(default_factory=list)
    num_classes: Optional[int] = None

    @property
    def mean(self) -> float:
        if not self.accuracies:
            raise InputError("report has no accuracies")
        return math.fsum(self.accuracies.values()) / len(self.accuracies)

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["mean"] = self.mean
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ExperimentReport":
        return cls(method=rec["method"], data=rec["data"], accuracies=dict(rec["accuracies"]),
                   seeds=list(rec.get("seeds", [])), num_classes=rec.get("num_classes"))


def read_fragments(paths: Iterable) -> list[ExperimentReport]:
    """Each fragment file holds one JSON record per line."""
    out = []
    for path in paths:
        for line in Path(path).read_text().splitlines():
            if line.strip():
                out.append(ExperimentReport.from_record(json.loads(line)))
    return out


def merge_reports(reports: Sequence[ExperimentReport]) -> list[ExperimentReport]:
    """Combine fragments sharing (method, data) into one row each."""
    classes = {r.num_classes for r in reports if r.num_classes is not None}
    if len(classes) > 1:
        raise InputError(f"fragments disagree on the number of classes: {sorted(classes)}")
    rows: dict[tuple[str, str], ExperimentReport] = {}
    for r in reports:
        row = rows.setdefault((r.method, r.data), ExperimentReport(r.method, r.data, {}, [], r.num_classes))
        row.accuracies.update(r.accuracies)
        row.seeds.extend(s for s in r.seeds if s not in row.seeds)
    return list(rows.values())


def render_table(rows: Sequence[ExperimentReport]) -> tuple[str, list[dict]]:
    """Aligned text table plus machine records (with a degradation column when both data modes exist)."""
    pairs = sorted({p for r in rows for p in r.accuracies})
    std_mean = {r.method: r.mean for r in rows if r.data == "standard"}
    header = ["Method", "Data", *pairs, "Mean", "Degrad."]
    lines, records = [header], []
    for r in rows:
        deg = None
        if r.data == "uncurated" and r.method in std_mean:
            deg = degradation(std_mean[r.method], r.mean)
        lines.append([r.method, r.data[0].upper(),
                      *(f"{r.accuracies[p]:.1f}" if p in r.accuracies else "-" for p in pairs),
                      f"{r.mean:.1f}", "" if deg is None else f"{deg:.1f}%"])
        records.append(dict(r.to_record(), degradation=deg))
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    text = "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in lines)
    return text + "\n", records
