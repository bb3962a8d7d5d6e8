"""On-disk text formats, version "hetdyn-1".

Three self-describing column formats: solution files (one or more collocation
segments with full node data), branch summary files (one row per continuation
point), and section-curve files (intersection curves / point sequences in the
section coordinates).  Floats are serialized with repr, so write/read
round-trips are bit exact.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field as dfield
from pathlib import Path

import numpy as np

from . import bvp, model

__all__ = [
    "FORMAT_VERSION",
    "write_solution",
    "read_solution",
    "SolutionData",
    "write_branch",
    "read_branch",
    "BranchData",
    "write_curve",
    "read_curve",
    "CurveData",
    "write_meta",
]

FORMAT_VERSION = "hetdyn-1"


def _fmt(x: float) -> str:
    return repr(float(x))


def _params_line(pvals: dict) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in sorted(pvals.items()))


def _parse_params(s: str) -> dict:
    out = {}
    for tok in s.split():
        k, v = tok.split("=", 1)
        out[k] = float(v)
    return out


# ---------------------------------------------------------------- solutions

@dataclass
class SolutionData:
    label: str
    kind: str
    pvals: dict
    total_time: float
    segments: list            # list of (mesh, m, taus, values, T)
    multipliers: np.ndarray | None = None
    eigvectors: dict = dfield(default_factory=dict)
    extra: dict = dfield(default_factory=dict)

    def to_segments(self, field=None) -> list:
        field = field or model.FIELD
        segs = []
        for mesh, m, taus, values, T in self.segments:
            segs.append(bvp.OrbitSegment(field, mesh, m, values.copy(), T,
                                         dict(self.pvals)))
        return segs


def write_solution(path, label: str, kind: str, pvals: dict,
                   segments, multipliers=None, eigvectors: dict | None = None,
                   extra: dict | None = None):
    """segments: OrbitSegment or list of them."""
    if isinstance(segments, bvp.OrbitSegment):
        segments = [segments]
    buf = io.StringIO()
    buf.write(f"# format: {FORMAT_VERSION} solution\n")
    buf.write(f"# label: {label}\n")
    buf.write(f"# kind: {kind}\n")
    buf.write(f"# params: {_params_line(pvals)}\n")
    total = sum(s.T for s in segments)
    buf.write(f"# total_time: {_fmt(total)}\n")
    if multipliers is not None:
        mm = " ".join(f"{_fmt(np.real(z))},{_fmt(np.imag(z))}" for z in multipliers)
        buf.write(f"# multipliers: {mm}\n")
    for name, vec in (eigvectors or {}).items():
        buf.write(f"# eigvec: {name} " + " ".join(_fmt(v) for v in np.asarray(vec)) + "\n")
    for k, v in (extra or {}).items():
        buf.write(f"# {k}: {v}\n")
    buf.write(f"# n_segments: {len(segments)}\n")
    for i, seg in enumerate(segments):
        buf.write(f"# segment: {i} N: {seg.N} m: {seg.m} T: {_fmt(seg.T)}\n")
        buf.write("# columns: tau c v c_t n\n")
        taus = seg.node_taus()
        for t, row in zip(taus, seg.values):
            buf.write(_fmt(t) + " " + " ".join(_fmt(x) for x in row) + "\n")
    Path(path).write_text(buf.getvalue())


def read_solution(path) -> SolutionData:
    lines = Path(path).read_text().splitlines()
    hdr: dict = {}
    eigv: dict = {}
    segments = []
    i = 0
    cur = None
    mult = None
    while i < len(lines):
        ln = lines[i]
        if ln.startswith("#"):
            body = ln[1:].strip()
            if ":" in body:
                key, val = body.split(":", 1)
                key, val = key.strip(), val.strip()
                if key == "segment":
                    toks = val.split()
                    cur = {"i": int(toks[0]), "N": int(toks[2]), "m": int(toks[4]),
                           "T": float(toks[6]), "rows": []}
                    segments.append(cur)
                elif key == "multipliers":
                    mult = np.array([complex(float(a), float(b))
                                     for a, b in (t.split(",") for t in val.split())])
                elif key == "eigvec":
                    toks = val.split()
                    eigv[toks[0]] = np.array([float(x) for x in toks[1:]])
                else:
                    hdr[key] = val
        else:
            cur["rows"].append([float(x) for x in ln.split()])
        i += 1
    segs = []
    for c in segments:
        rows = np.array(c["rows"])
        taus, values = rows[:, 0], rows[:, 1:]
        m = c["m"]
        mesh = np.concatenate([taus[:: m + 1], [taus[-1]]]) if len(taus) > 1 else taus
        # mesh points sit every (m+1) nodes; the final node is the last mesh point
        N = c["N"]
        mesh = np.empty(N + 1)
        mesh[:-1] = taus[0: N * (m + 1): m + 1]
        mesh[-1] = taus[-1]
        segs.append((mesh, m, taus, values, c["T"]))
    return SolutionData(label=hdr.get("label", ""), kind=hdr.get("kind", ""),
                        pvals=_parse_params(hdr.get("params", "")),
                        total_time=float(hdr.get("total_time", "0")),
                        segments=segs, multipliers=mult, eigvectors=eigv,
                        extra={k: v for k, v in hdr.items()
                               if k not in ("format", "label", "kind", "params",
                                            "total_time", "n_segments")})


# ---------------------------------------------------------------- branches

@dataclass
class BranchData:
    free_param: str
    kind: str
    columns: list
    rows: np.ndarray
    labels: list


def write_branch(path, branch, second_param: str | None = None):
    """One row per branch point: parameters, norm, period, leading stability
    values (re, im pairs), label."""
    buf = io.StringIO()
    buf.write(f"# format: {FORMAT_VERSION} branch\n")
    buf.write(f"# kind: {branch.kind}\n")
    buf.write(f"# free_param: {branch.free_param}\n")
    n_stab = max((len(bp.stability) for bp in branch.points), default=0)
    cols = [branch.free_param]
    if second_param:
        cols.append(second_param)
    cols += ["norm", "period"]
    for k in range(n_stab):
        cols += [f"stab{k}_re", f"stab{k}_im"]
    cols += ["label"]
    buf.write("# columns: " + " ".join(cols) + "\n")
    for bp in branch.points:
        row = [bp.pvals[branch.free_param]]
        if second_param:
            row.append(bp.pvals[second_param])
        row += [bp.norm, bp.T if bp.T is not None else 0.0]
        stab = list(bp.stability) + [0.0] * (n_stab - len(bp.stability))
        for z in stab:
            row += [np.real(z), np.imag(z)]
        buf.write(" ".join(_fmt(x) for x in row) + f" {bp.label or '-'}\n")
    Path(path).write_text(buf.getvalue())


def read_branch(path) -> BranchData:
    lines = Path(path).read_text().splitlines()
    hdr = {}
    rows, labels = [], []
    for ln in lines:
        if ln.startswith("#"):
            body = ln[1:].strip()
            if ":" in body:
                k, v = body.split(":", 1)
                hdr[k.strip()] = v.strip()
        elif ln.strip():
            toks = ln.split()
            rows.append([float(x) for x in toks[:-1]])
            labels.append(None if toks[-1] == "-" else toks[-1])
    return BranchData(free_param=hdr.get("free_param", ""),
                      kind=hdr.get("kind", ""),
                      columns=hdr.get("columns", "").split(),
                      rows=np.array(rows), labels=labels)


# ---------------------------------------------------------------- curves

@dataclass
class CurveData:
    label: str
    kind: str
    pvals: dict
    columns: list
    rows: np.ndarray
    extra: dict = dfield(default_factory=dict)

    def sigma_points(self) -> np.ndarray:
        """(n, 3) array of (v, c_t, n) coordinates."""
        iv = self.columns.index("v")
        return self.rows[:, iv:iv + 3]


def write_curve(path, label: str, kind: str, pvals: dict, rows: np.ndarray,
                columns=("family_param", "k", "v", "c_t", "n", "side"),
                extra: dict | None = None):
    buf = io.StringIO()
    buf.write(f"# format: {FORMAT_VERSION} curve\n")
    buf.write(f"# label: {label}\n")
    buf.write(f"# kind: {kind}\n")
    buf.write(f"# params: {_params_line(pvals)}\n")
    for k, v in (extra or {}).items():
        buf.write(f"# {k}: {v}\n")
    buf.write("# columns: " + " ".join(columns) + "\n")
    for row in np.asarray(rows):
        buf.write(" ".join(_fmt(x) for x in row) + "\n")
    Path(path).write_text(buf.getvalue())


def read_curve(path) -> CurveData:
    lines = Path(path).read_text().splitlines()
    hdr = {}
    rows = []
    for ln in lines:
        if ln.startswith("#"):
            body = ln[1:].strip()
            if ":" in body:
                k, v = body.split(":", 1)
                hdr[k.strip()] = v.strip()
        elif ln.strip():
            rows.append([float(x) for x in ln.split()])
    return CurveData(label=hdr.get("label", ""), kind=hdr.get("kind", ""),
                     pvals=_parse_params(hdr.get("params", "")),
                     columns=hdr.get("columns", "").split(),
                     rows=np.array(rows),
                     extra={k: v for k, v in hdr.items()
                            if k not in ("format", "label", "kind", "params",
                                         "columns")})


def write_meta(path, entries: dict):
    """run.meta: fully resolved configuration echo, key = value per line."""
    with open(path, "w") as f:
        for k in sorted(entries):
            f.write(f"{k} = {entries[k]}\n")
