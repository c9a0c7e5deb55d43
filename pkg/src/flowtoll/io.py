"""Instance and result files, run configuration, and instance generators.

Instance files are line oriented::

    flowtoll-instance 1
    name pigou2
    vertex s
    vertex t
    edge s t affine 1.0 0.0
    edge s t monomial 0.5 2 0.0
    demand s t
    opt 1.5

``#`` starts a comment.  Floats are written with ``repr`` so a parse of the
written text returns the same instance.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .game_core import LatencyFn, RoutingInstance

__all__ = [
    "INSTANCE_HEADER",
    "RESULT_SCHEMA",
    "RESULT_VERSION",
    "InstanceError",
    "InstanceFile",
    "parse_instance_file",
    "parse_instance",
    "format_instance",
    "builtin_instance",
    "load_instance",
    "RunConfig",
    "default_seed",
    "generate_instance",
    "to_jsonable",
    "dump_result",
    "load_result",
]

INSTANCE_HEADER = "flowtoll-instance"
INSTANCE_VERSION = 1
RESULT_SCHEMA = "flowtoll-result"
RESULT_VERSION = 1


class InstanceError(ValueError):
    """Bad instance document; ``line`` and ``column`` are 1-based when known."""

    def __init__(self, msg, line=None, column=None):
        self.line = line
        self.column = column
        where = f"line {line}, column {column}: " if line is not None else ""
        super().__init__(where + msg)


@dataclass(frozen=True)
class InstanceFile:
    instance: RoutingInstance
    opt: float | None = None


def _tokens(line: str):
    """Yield ``(column, token)`` pairs, columns 1-based."""
    col = 0
    for part in line.split():
        col = line.index(part, col)
        yield col + 1, part
        col += len(part)


def _float(tok, ln, col):
    try:
        v = float(tok)
    except ValueError:
        raise InstanceError(f"expected a number, got {tok!r}", ln, col) from None
    if not math.isfinite(v):
        raise InstanceError(f"non-finite number {tok!r}", ln, col)
    return v


def parse_instance_file(text: str) -> InstanceFile:
    vertices, edges, lats, demands = [], [], [], []
    name, opt = "", None
    header_seen = False
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        toks = list(_tokens(line))
        if not toks:
            continue
        (c0, kw), args = toks[0], toks[1:]
        if not header_seen:
            if kw != INSTANCE_HEADER:
                raise InstanceError(f"expected header {INSTANCE_HEADER!r}", ln, c0)
            if len(args) != 1 or args[0][1] != str(INSTANCE_VERSION):
                raise InstanceError(f"unsupported instance version", ln, args[0][0] if args else c0)
            header_seen = True
            continue
        if kw == "name":
            if len(args) != 1:
                raise InstanceError("name takes one token", ln, c0)
            name = args[0][1]
        elif kw == "vertex":
            if len(args) != 1:
                raise InstanceError("vertex takes one id", ln, c0)
            if args[0][1] in vertices:
                raise InstanceError(f"duplicate vertex id {args[0][1]!r}", ln, args[0][0])
            vertices.append(args[0][1])
        elif kw == "edge":
            if len(args) < 3:
                raise InstanceError("edge needs tail, head and a latency", ln, c0)
            (_, u), (_, v), (cf, fam) = args[:3]
            coef = args[3:]
            if fam == "affine":
                if len(coef) != 2:
                    raise InstanceError("affine latency takes a and b", ln, cf)
                a, b = (_float(t, ln, c) for c, t in coef)
                lat_args = ("affine", a, b, 1)
            elif fam == "monomial":
                if len(coef) != 3:
                    raise InstanceError("monomial latency takes a, k and b", ln, cf)
                a = _float(coef[0][1], ln, coef[0][0])
                kc, kt = coef[1]
                if not kt.isdigit():
                    raise InstanceError(f"exponent must be a positive integer, got {kt!r}", ln, kc)
                b = _float(coef[2][1], ln, coef[2][0])
                lat_args = ("monomial", a, b, int(kt))
            else:
                raise InstanceError(f"unknown latency family {fam!r}", ln, cf)
            try:
                lats.append(LatencyFn(*lat_args))
            except ValueError as err:
                raise InstanceError(str(err), ln, cf) from None
            edges.append((u, v))
        elif kw == "demand":
            if len(args) != 2:
                raise InstanceError("demand takes source and target", ln, c0)
            demands.append((args[0][1], args[1][1]))
        elif kw == "opt":
            if len(args) != 1:
                raise InstanceError("opt takes one number", ln, c0)
            opt = _float(args[0][1], ln, args[0][0])
        else:
            raise InstanceError(f"unknown keyword {kw!r}", ln, c0)
    if not header_seen:
        raise InstanceError("empty document")
    if not demands:
        raise InstanceError("instance needs at least one demand")
    try:
        inst = RoutingInstance(tuple(vertices), tuple(edges), tuple(lats), tuple(demands), name)
    except ValueError as err:
        raise InstanceError(str(err)) from None
    return InstanceFile(inst, opt)


def parse_instance(text: str) -> RoutingInstance:
    return parse_instance_file(text).instance


def format_instance(inst: RoutingInstance, opt: float | None = None) -> str:
    out = [f"{INSTANCE_HEADER} {INSTANCE_VERSION}"]
    if inst.name:
        out.append(f"name {inst.name}")
    out += [f"vertex {v}" for v in inst.vertices]
    for (u, v), lat in zip(inst.edges, inst.latencies):
        if lat.family == "affine":
            out.append(f"edge {u} {v} affine {lat.a!r} {lat.b!r}")
        else:
            out.append(f"edge {u} {v} monomial {lat.a!r} {lat.k} {lat.b!r}")
    out += [f"demand {s} {t}" for s, t in inst.demands]
    if opt is not None:
        out.append(f"opt {float(opt)!r}")
    return "\n".join(out) + "\n"


def builtin_instance(name: str) -> RoutingInstance:
    """``pigou<n>``: two parallel s-t links, ``l = y`` and ``l = 2``, with ``n`` players."""
    if name.startswith("pigou") and name[5:].isdigit():
        n = int(name[5:])
        return RoutingInstance(("s", "t"), (("s", "t"), ("s", "t")),
                               (LatencyFn.affine(1.0, 0.0), LatencyFn.affine(0.0, 2.0)),
                               (("s", "t"),) * n, name)
    raise KeyError(name)


def load_instance(path_or_name: str) -> InstanceFile:
    if os.path.exists(path_or_name):
        with open(path_or_name, encoding="utf-8") as fh:
            return parse_instance_file(fh.read())
    try:
        return InstanceFile(builtin_instance(path_or_name))
    except KeyError:
        raise FileNotFoundError(f"no instance file or built-in named {path_or_name!r}") from None


def default_seed() -> int:
    return int(os.environ.get("FLOWTOLL_SEED", "0"))


@dataclass
class RunConfig:
    eps: float = 1.0
    delta: float = 1e-3
    beta: float = 0.05
    noise_free: bool = False
    seed: int = 0
    c_t: float = 1.0
    c_alpha: float = 1.0
    flip_dual_sign: bool = False
    rounds: int | None = None
    trials: int = 10000
    output: str | None = None

    @property
    def mediator_eps(self) -> float:
        return math.inf if self.noise_free else self.eps

    def mediator_kwargs(self) -> dict:
        return {"c_t": self.c_t, "c_alpha": self.c_alpha, "rounds": self.rounds,
                "flip_dual_sign": self.flip_dual_sign}

    def to_dict(self) -> dict:
        return asdict(self)


def to_jsonable(obj):
    """Turn numpy values, tuples and non-finite floats into plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dump_result(result: dict) -> str:
    doc = {"schema": RESULT_SCHEMA, "version": RESULT_VERSION}
    doc.update(result)
    return json.dumps(to_jsonable(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def load_result(text: str) -> dict:
    doc = json.loads(text)
    if doc.get("schema") != RESULT_SCHEMA:
        raise ValueError("not a flowtoll result file")
    if doc.get("version") != RESULT_VERSION:
        raise ValueError(f"unsupported result version {doc.get('version')!r}")
    return doc


def _latency(rng, family, n, e):
    if family == "pigou":
        return LatencyFn.affine(1.0, 0.0) if e == 0 else LatencyFn.affine(0.0, float(n))
    if family == "affine":
        a = round(float(rng.uniform(0.1, 1.0)), 3)
        b = round(float(rng.uniform(0.0, n * (1.0 - a))), 3)
        return LatencyFn.affine(a, b)
    if family == "monomial":
        k = int(rng.integers(2, 4))
        a = round(float(rng.uniform(0.2, 1.0)) * n ** (1 - k), 4)
        b = round(float(rng.uniform(0.0, max(n - a * n ** k, 0.0))), 3)
        return LatencyFn.monomial(a, k, b)
    if family == "mixed":
        return _latency(rng, ("affine", "monomial")[int(rng.integers(2))], n, e)
    raise ValueError(f"unknown latency family {family!r}")


def _parallel_links(rng, n, m, family):
    edges = [("s", "t")] * m
    lats = [_latency(rng, family, n, e) for e in range(m)]
    return ("s", "t"), edges, lats, [("s", "t")] * n


def _grid(rng, n, m, family):
    k = 2
    while 4 * k * (k - 1) < m:
        k += 1
    rows, cols = k, k
    verts = [f"r{r}c{c}" for r in range(rows) for c in range(cols)]
    edges = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                edges += [(f"r{r}c{c}", f"r{r}c{c + 1}"), (f"r{r}c{c + 1}", f"r{r}c{c}")]
            if r + 1 < rows:
                edges += [(f"r{r}c{c}", f"r{r + 1}c{c}"), (f"r{r + 1}c{c}", f"r{r}c{c}")]
    lats = [_latency(rng, family, n, e) for e in range(len(edges))]
    demands = []
    for _ in range(n):
        s, t = rng.choice(len(verts), size=2, replace=False)
        demands.append((verts[int(s)], verts[int(t)]))
    return tuple(verts), edges, lats, demands


def _layered_dag(rng, n, m, family):
    width = 2
    layers = max(1, round((m - 2 * width) / (width * width)) + 1)
    names = [["s"]] + [[f"l{j}v{w}" for w in range(width)] for j in range(layers)] + [["t"]]
    edges = []
    for a, b in zip(names[:-1], names[1:]):
        keep = rng.random((len(a), len(b))) < 0.75
        for r in range(len(a)):
            if not keep[r].any():
                keep[r, int(rng.integers(len(b)))] = True
        for c in range(len(b)):
            if not keep[:, c].any():
                keep[int(rng.integers(len(a))), c] = True
        edges += [(a[r], b[c]) for r in range(len(a)) for c in range(len(b)) if keep[r, c]]
    verts = tuple(v for layer in names for v in layer)
    lats = [_latency(rng, family, n, e) for e in range(len(edges))]
    demands = []
    for _ in range(n):
        if rng.random() < 0.5:
            demands.append(("s", "t"))
        else:
            i = int(rng.integers(0, len(names) - 1))
            j = int(rng.integers(i + 1, len(names)))
            demands.append((str(rng.choice(names[i])), str(rng.choice(names[j]))))
    return verts, edges, lats, demands


_KINDS = {"parallel-links": _parallel_links, "grid": _grid, "layered-DAG": _layered_dag}


def generate_instance(kind: str, n: int, m: int, family: str = "affine", seed: int = 0) -> RoutingInstance:
    """Random instance of the given shape; the same arguments give the same instance."""
    if kind not in _KINDS:
        raise ValueError(f"unknown instance kind {kind!r}; choose from {sorted(_KINDS)}")
    if n < 1 or m < 1:
        raise ValueError("n and m must be positive")
    rng = np.random.default_rng([seed, n, m])
    last = None
    for _ in range(100):
        verts, edges, lats, demands = _KINDS[kind](rng, n, m, family)
        try:
            inst = RoutingInstance(verts, edges, lats, demands, f"{kind}-n{n}-m{m}-{family}-s{seed}")
        except ValueError as err:
            last = err
            continue
        return inst
    raise ValueError(f"could not generate a routable {kind} instance in 100 tries: {last}")
