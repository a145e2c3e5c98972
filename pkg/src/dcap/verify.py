"""Executable checks of the model's mathematical properties.

The oracles here are deliberately independent of the production path:
finite differences for gradients, and a scalar-loop re-implementation of a
cross layer that uses only Python floats and ``math``.

Degree of the cross features. Hold every softmax weight fixed at the
value computed from the unscaled input (pooling weights are constants
anyway). Then each layer is a fixed multilinear map: attention output is
linear in its input, the pair product multiplies it by one more copy of
the original embedding, and pooling is a fixed average. Layer ``l``'s
summed output ``Y`` is therefore homogeneous of degree ``l + 1`` in the
embedding matrix, which :func:`homogeneity_report` and
:func:`degree_slope` measure directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import MultiHeadParams
from .crossnet import n_pairs, stack_layers
from .errors import ContractError, OracleError

PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-5
HOMOGENEITY_TOL = 1e-8
SLOPE_TOL = 1e-6
REFERENCE_TOL = 1e-10


# ---------------------------------------------------------- gradients


def _scalar(v) -> float:
    return v.item() if isinstance(v, nx.Tensor) else float(v)


def finite_diff_grad(fn, params, eps=1e-5):
    """Central differences of ``fn()`` w.r.t. every entry of ``params``.

    ``fn`` returns a float or a scalar Tensor.

    Entries are perturbed in place and restored. Intended for a few
    thousand coordinates at most.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    out = {}
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = _scalar(fn())
            flat[k] = orig - eps
            lo = _scalar(fn())
            flat[k] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise OracleError(f"non-finite function value while probing {p.name or p.shape}[{k}]")
            gflat[k] = (hi - lo) / (2 * eps)
        out[p] = g
    return out


def relative_error(a, b) -> float:
    """||a - b|| / max(||a||, ||b||); zero when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def backprop_grad(build, params):
    with nx.Tape() as tape:
        root = build()
    return tape.backward(root, wrt=params)


def gradient_check(build, params, eps=1e-5):
    """Relative error between backprop and finite differences per parameter.

    ``build`` returns a scalar Tensor; it is called under a tape for the
    analytic gradient and without one for the numerical probes.
    """
    analytic = backprop_grad(build, params)
    numeric = finite_diff_grad(lambda: build().item(), params, eps)
    return {p: relative_error(analytic[p], numeric[p]) for p in params}


def _rand(rng, *shape):
    return nx.Tensor(rng.uniform(-2.0, 2.0, size=shape), requires_grad=True)


def primitive_gradient_errors(seed=0):
    """Max relative error per primitive on random inputs in [-2, 2]."""
    from . import crossnet

    rng = np.random.default_rng(seed)
    cases = {}

    weights = {}

    def weighted(t):
        # fixed random weighting so the root depends on every output entry differently
        w = weights.setdefault(t.shape, nx.Tensor(rng.normal(size=t.shape)))
        out = nx.mul(t, w)
        while out.ndim > 0:
            out = nx.reduce(out, axis=0)
        return out

    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    cases["matmul"] = ([a, b], lambda: weighted(nx.matmul(a, b)))
    a3, b2 = _rand(rng, 2, 3, 4), _rand(rng, 4, 3)
    cases["matmul_batched"] = ([a3, b2], lambda: weighted(nx.matmul(a3, b2)))
    c3, d3 = _rand(rng, 2, 3, 4), _rand(rng, 2, 4, 3)
    cases["matmul_3d3d"] = ([c3, d3], lambda: weighted(nx.matmul(c3, d3)))
    x, y = _rand(rng, 3, 4), _rand(rng, 3, 4)
    for kind in ("add", "sub", "mul"):
        cases[kind] = ([x, y], lambda kind=kind: weighted(nx.elementwise(x, y, kind)))
    s = _rand(rng, 3, 5)
    cases["softmax_rows"] = ([s], lambda: weighted(nx.softmax_rows(s)))
    r = _rand(rng, 2, 3, 4)
    for ax in range(3):
        for kind in ("sum", "mean"):
            cases[f"reduce_{kind}_{ax}"] = ([r], lambda ax=ax, kind=kind: weighted(nx.reduce(r, ax, kind)))
    p1, p2 = _rand(rng, 2, 3), _rand(rng, 2, 1)
    cases["concat"] = ([p1, p2], lambda: weighted(nx.concat([p1, p2], axis=1)))
    tt = _rand(rng, 3, 4)
    cases["transpose"] = ([tt], lambda: weighted(nx.transpose(tt)))
    cases["take"] = ([tt], lambda: weighted(nx.take(tt, 1, 3, axis=1)))
    cases["reshape"] = ([tt], lambda: weighted(nx.reshape(tt, (2, 6))))
    bb = _rand(rng, 4)
    cases["add_bias"] = ([tt, bb], lambda: weighted(nx.add_bias(tt, bb)))
    cases["scale"] = ([tt], lambda: weighted(nx.scale(tt, -1.7)))
    # keep relu inputs away from the kink so central differences are valid
    rr = nx.Tensor(np.sign(rng.uniform(-1, 1, (3, 4))) * rng.uniform(0.1, 2.0, (3, 4)), requires_grad=True)
    cases["relu"] = ([rr], lambda: weighted(nx.relu(rr)))
    cases["sigmoid"] = ([tt], lambda: weighted(nx.sigmoid(tt)))
    pos = nx.Tensor(rng.uniform(0.2, 2.0, (3, 4)), requires_grad=True)
    cases["log"] = ([pos], lambda: weighted(nx.log(pos)))
    cl = nx.Tensor(rng.choice([-1.0, 1.0], (3, 4)) * rng.uniform(0.2, 0.8, (3, 4)) + rng.choice([0, 3.0], (3, 4)),
                   requires_grad=True)
    cases["clip"] = ([cl], lambda: weighted(nx.clip(cl, -1.0, 1.0)))
    nl = _rand(rng, 2, 3, 4)
    cases["normalize_last"] = ([nl], lambda: weighted(nx.normalize_last(nl)))
    table = _rand(rng, 5, 3)
    ids = np.array([0, 3, 3, 1])
    cases["gather_rows"] = ([table], lambda: weighted(nx.gather_rows(table, ids)))
    z, xx = _rand(rng, 2, 4, 3), _rand(rng, 2, 4, 3)
    for kind in ("inner", "outer"):
        cases[f"pair_products_{kind}"] = ([z, xx], lambda kind=kind: weighted(crossnet.pair_products(z, xx, kind)))
    pp = _rand(rng, 2, 6, 3)
    cases["adaptive_avg_pool"] = ([pp], lambda: weighted(crossnet.adaptive_avg_pool(pp, 4)))
    va, vb = _rand(rng, 4), _rand(rng, 4)
    cases["outer_product"] = ([va, vb], lambda: weighted(crossnet.outer_product(va, vb)))

    result = {}
    for name, (params, build) in cases.items():
        errs = gradient_check(build, params)
        result[name] = max(errs.values())
    return result


def toy_model(product="inner", seed=0):
    """The small DCAP used by the gradient suite (n=4, d=8, L=2, h=2, hidden 5/5).

    Embedding entries are redrawn from [-2, 2]. At the default init the
    second layer's query/key gradients are ~1e-8, below what central
    differences at eps=1e-5 can resolve in float64.
    """
    from .model import DCAP, DcapConfig

    cfg = DcapConfig([3, 4, 3, 5], ["a", "b", "c", "e"], embedding_dim=8, layers=2, heads=2,
                     product=product, hidden=(5, 5), dropout=0.0, seed=seed)
    model = DCAP(cfg)
    rng = np.random.default_rng([seed, 7])
    for t in model.embedding.tables:
        t.data = rng.uniform(-2.0, 2.0, t.shape)
    return model


def model_gradient_errors(model, ids, labels, eps=1e-5):
    """Relative error per parameter group for the log loss of ``model``."""
    from .model import logloss

    groups = model.parameter_groups() if hasattr(model, "parameter_groups") else {"all": model.parameters()}
    params = model.parameters()
    build = lambda: logloss(model.forward(ids), labels)
    analytic = backprop_grad(build, params)
    numeric = finite_diff_grad(lambda: build().item(), params, eps)
    out = {}
    for name, members in groups.items():
        a = np.concatenate([analytic[p].reshape(-1) for p in members])
        n = np.concatenate([numeric[p].reshape(-1) for p in members])
        out[name] = relative_error(a, n)
    return out


# ---------------------------------------------------------- homogeneity


def frozen_forward(X, layer_params, kind="inner", t=1.0, residual=False, layer_norm=False):
    """Per-layer ``Y`` for input ``t * X`` with attention weights frozen at ``X``.

    Normalisation inside the layer breaks homogeneity, so it is refused.
    """
    if layer_norm:
        raise ContractError("homogeneity is undefined with layer normalisation enabled")
    X = np.asarray(X.data if isinstance(X, nx.Tensor) else X, dtype=np.float64)
    base = stack_layers(nx.Tensor(X), layer_params, kind, residual=residual)
    frozen = [tr.attention for tr in base]
    scaled = stack_layers(nx.Tensor(t * X), layer_params, kind, frozen=frozen, residual=residual)
    return [tr.Y.data.copy() for tr in scaled]


@dataclass
class HomogeneityRow:
    layer: int
    t: float
    observed_ratio: float
    expected_ratio: float
    deviation: float
    kind: str = "inner"

    @property
    def passed(self):
        return self.deviation <= HOMOGENEITY_TOL


@dataclass
class HomogeneityReport:
    rows: list = field(default_factory=list)

    def append(self, row: HomogeneityRow):
        self.rows.append(row)

    @property
    def passed(self):
        return all(r.passed for r in self.rows)

    def to_tsv(self):
        lines = ["product\tlayer\tt\tobserved_ratio\texpected_ratio\trelative_deviation\tpass"]
        for r in self.rows:
            lines.append(f"{r.kind}\t{r.layer}\t{r.t:g}\t{r.observed_ratio:.15g}\t{r.expected_ratio:.15g}\t"
                         f"{r.deviation:.3e}\t{'yes' if r.passed else 'no'}")
        return "\n".join(lines) + "\n"


def homogeneity_report(X, layer_params, kind="inner", scales=(0.5, 2.0, 3.0), residual=False):
    """Compare Y^(l)(tX) with t^(l+1) Y^(l)(X) for every layer and scale."""
    report = HomogeneityReport()
    ref = frozen_forward(X, layer_params, kind, 1.0, residual)
    for t in scales:
        ys = frozen_forward(X, layer_params, kind, t, residual)
        for l, (y, y0) in enumerate(zip(ys, ref), start=1):
            expected = t ** (l + 1)
            n0 = np.linalg.norm(y0)
            dev = np.linalg.norm(y - expected * y0) / n0
            report.append(HomogeneityRow(l, t, float(np.linalg.norm(y) / n0), expected, float(dev), kind))
    return report


def degree_slope(X, layer_params, layer, kind="inner", scales=(1.0, 2.0, 4.0, 8.0), residual=False):
    """Least-squares slope of ln||Y^(layer)(tX)|| against ln t."""
    lt = np.log(np.asarray(scales))
    ly = np.array([np.log(np.linalg.norm(frozen_forward(X, layer_params, kind, t, residual)[layer - 1]))
                   for t in scales])
    slope, _ = np.polyfit(lt, ly, 1)
    return float(slope)


# ----------------------------------------------------- scalar reference


def raw_weights(params: MultiHeadParams):
    """Nested-list copy of a layer's projections for the scalar reference."""
    return {
        "query": [w.data.tolist() for w in params.query],
        "key": [w.data.tolist() for w in params.key],
        "value": [w.data.tolist() for w in params.value],
        "output": params.output.data.tolist(),
    }


class _Tally:
    def __init__(self):
        self.count = 0


def _vecmat(x, W, tally):
    cols = len(W[0])
    out = [0.0] * cols
    for c in range(cols):
        acc = 0.0
        for r in range(len(x)):
            acc += x[r] * W[r][c]
            tally.count += 1
        out[c] = acc
    return out


def naive_reference_layer(X_l, X_0, weights, kind="inner", tally=None):
    """One cross layer written with explicit scalar loops.

    ``X_l`` and ``X_0`` are nested lists ``[n][d]``; ``weights`` comes from
    :func:`raw_weights`. Returns a dict of nested lists ``Z``, ``P``, ``Y``,
    ``X_next`` and per-head ``attention``. ``tally`` counts multiply-adds.
    """
    tally = tally or _Tally()
    X_l = [list(map(float, row)) for row in X_l]
    X_0 = [list(map(float, row)) for row in X_0]
    n, d = len(X_l), len(X_l[0])
    h = len(weights["query"])
    dv = len(weights["query"][0][0])
    heads_out = [[0.0] * (h * dv) for _ in range(n)]
    attention = []
    for head in range(h):
        Q = [_vecmat(X_l[i], weights["query"][head], tally) for i in range(n)]
        K = [_vecmat(X_l[i], weights["key"][head], tally) for i in range(n)]
        V = [_vecmat(X_l[i], weights["value"][head], tally) for i in range(n)]
        alpha = []
        for i in range(n):
            e = []
            for j in range(n):
                acc = 0.0
                for c in range(dv):
                    acc += Q[i][c] * K[j][c]
                    tally.count += 1
                e.append(acc / math.sqrt(dv))
            top = max(e)
            ex = [math.exp(v - top) for v in e]
            tot = sum(ex)
            alpha.append([v / tot for v in ex])
        attention.append(alpha)
        for i in range(n):
            for c in range(dv):
                acc = 0.0
                for j in range(n):
                    acc += alpha[i][j] * V[j][c]
                    tally.count += 1
                heads_out[i][head * dv + c] = acc
    Z = [_vecmat(heads_out[i], weights["output"], tally) for i in range(n)]

    P = []
    for i in range(n):
        for j in range(i + 1, n):
            if kind == "inner":
                row = []
                for c in range(d):
                    row.append(Z[i][c] * X_0[j][c])
                    tally.count += 1
            else:
                sb = 0.0
                for c in range(d):
                    sb += X_0[j][c]
                row = []
                for c in range(d):
                    row.append(Z[i][c] * sb)
                    tally.count += 1
            P.append(row)
    Y = [sum(row) for row in P]

    m = len(P)
    X_next = []
    for i in range(n):
        lo = (i * m) // n
        hi = -((-(i + 1) * m) // n)
        X_next.append([sum(P[r][c] for r in range(lo, hi)) / (hi - lo) for c in range(d)])
    return {"Z": Z, "P": P, "Y": Y, "X_next": X_next, "attention": attention, "mult_adds": tally.count}


def reference_max_deviation(X_l, X_0, params: MultiHeadParams, kind="inner"):
    """Largest absolute gap between production and scalar reference outputs."""
    from .crossnet import layer_forward

    prod = layer_forward(nx.Tensor(X_l), nx.Tensor(X_0), params, kind)
    ref = naive_reference_layer(np.asarray(X_l).tolist(), np.asarray(X_0).tolist(), raw_weights(params), kind)
    gaps = [
        np.abs(prod.Z.data - np.array(ref["Z"])).max(),
        np.abs(prod.P.data - np.array(ref["P"])).max(),
        np.abs(prod.Y.data - np.array(ref["Y"])).max(),
        np.abs(prod.X_next.data - np.array(ref["X_next"])).max(),
    ]
    for a, b in zip(prod.attention.heads, ref["attention"]):
        gaps.append(np.abs(a - np.array(b)).max())
    return float(max(gaps))


def random_reference_instance(rng, max_n=5, max_d=4):
    n = int(rng.integers(3, max_n + 1))
    divisors = [(d, h) for d in range(1, max_d + 1) for h in range(1, d + 1) if d % h == 0]
    d, h = divisors[rng.integers(len(divisors))]
    params = MultiHeadParams.init(d, h, rng)
    X0 = rng.uniform(-2, 2, (n, d))
    Xl = rng.uniform(-2, 2, (n, d))
    return Xl, X0, params


# ------------------------------------------------------------ mult-adds


def count_mult_adds(n, d, layers, hidden=(100, 100), heads=1, instrumented=False, seed=0):
    """Closed-form multiply-add estimate, optionally with an empirical tally.

    ``cross`` = 3 n^2 d L + 4 n d^2 L for the cross layers, ``dense`` =
    d' h1 + h1 h2 + h2 for the head. The empirical tally runs the scalar
    reference layer and counts every multiply-accumulate it performs.
    """
    h1, h2 = hidden
    width = n * d + layers * n_pairs(n)
    out = {
        "cross": 3 * n * n * d * layers + 4 * n * d * d * layers,
        "dense": width * h1 + h1 * h2 + h2,
    }
    out["total"] = out["cross"] + out["dense"]
    if instrumented:
        rng = np.random.default_rng(seed)
        X0 = rng.uniform(-1, 1, (n, d)).tolist()
        X = X0
        total = 0
        for _ in range(layers):
            params = MultiHeadParams.init(d, heads, rng)
            ref = naive_reference_layer(X, X0, raw_weights(params))
            total += ref["mult_adds"]
            X = ref["X_next"]
        out["cross_empirical"] = total
    return out


# --------------------------------------------------------------- suite


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def run_suite(instances=100, seed=0, auc_cases=200):
    """Run every check; returns ``(results, homogeneity_report)``.

    A failing check never stops the suite.
    """
    from .crossnet import adaptive_avg_pool, layer_forward
    from .model import DcapConfig, logloss_value
    from .trainer import auc

    results: list[CheckResult] = []

    def run(name, fn):
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - a crashing check is a failed check
            ok, detail = False, f"error: {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail))

    def prim():
        errs = primitive_gradient_errors(seed)
        worst = max(errs, key=errs.get)
        return errs[worst] < PRIMITIVE_TOL, f"worst {worst} rel err {errs[worst]:.2e} (tol {PRIMITIVE_TOL:g})"

    run("gradient: primitives", prim)

    def full(kind):
        def check():
            rng = np.random.default_rng(seed)
            model = toy_model(kind, seed)
            ids = np.stack([rng.integers(0, v, 8) for v in model.config.vocab_sizes], axis=1)
            labels = rng.integers(0, 2, 8)
            errs = model_gradient_errors(model, ids, labels)
            worst = max(errs, key=errs.get)
            return errs[worst] < MODEL_TOL, f"{len(errs)} groups, worst {worst} {errs[worst]:.2e} (tol {MODEL_TOL:g})"
        return check

    run("gradient: full model (inner)", full("inner"))
    run("gradient: full model (outer)", full("outer"))

    rng = np.random.default_rng(seed + 1)
    hom_params = [MultiHeadParams.init(8, 2, rng) for _ in range(3)]
    X = rng.uniform(-1, 1, (4, 8))
    report = homogeneity_report(X, hom_params, "inner")
    outer_report = homogeneity_report(X, hom_params, "outer")
    for r in outer_report.rows:
        report.append(r)

    def hom():
        worst = max(r.deviation for r in report.rows)
        return report.passed, f"{len(report.rows)} (layer, t) cells, worst deviation {worst:.2e} (tol {HOMOGENEITY_TOL:g})"

    run("homogeneity: frozen coefficients", hom)

    def slopes():
        parts, ok = [], True
        for kind in ("inner", "outer"):
            for l in (1, 2, 3):
                s = degree_slope(X, hom_params, l, kind)
                ok &= abs(s - (l + 1)) < SLOPE_TOL
                parts.append(f"{kind[0]}{l}:{s:.9f}")
        return ok, " ".join(parts)

    run("homogeneity: log-log degree slope", slopes)

    def reference():
        r2 = np.random.default_rng(seed + 2)
        worst = 0.0
        for _ in range(instances):
            Xl, X0, params = random_reference_instance(r2)
            for kind in ("inner", "outer"):
                worst = max(worst, reference_max_deviation(Xl, X0, params, kind))
        return worst <= REFERENCE_TOL, f"{instances} instances x 2 kinds, max |diff| {worst:.2e}"

    run("oracle: scalar reference layer", reference)

    def bookkeeping():
        r3 = np.random.default_rng(seed + 3)
        cfg = DcapConfig([10] * 5, embedding_dim=16, layers=2, heads=4)
        ok = cfg.dense_input_width == 100
        for n in (3, 4, 5, 7):
            params = MultiHeadParams.init(4, 2, r3)
            tr = layer_forward(nx.Tensor(r3.normal(size=(n, 4))), nx.Tensor(r3.normal(size=(n, 4))), params)
            ok &= tr.Y.shape == (n * (n - 1) // 2,)
            ok &= tr.X_next.shape == (n, 4)
            ok &= all(np.abs(a.sum(axis=-1) - 1).max() <= 1e-9 for a in tr.attention.heads)
        ok &= adaptive_avg_pool(nx.Tensor(np.ones((10, 3))), 5).shape == (5, 3)
        return ok, f"d' = {cfg.dense_input_width} for n=5, d=16, L=2"

    run("structure: bookkeeping", bookkeeping)

    def metrics():
        r4 = np.random.default_rng(seed + 4)
        for _ in range(auc_cases):
            size = int(r4.integers(2, 60))
            labels = r4.integers(0, 2, size)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = r4.integers(0, 6, size) / 5.0
            if auc(scores, labels) != _brute_auc(scores.tolist(), labels.tolist()):
                return False, "AUC disagrees with pairwise count"
        ll = logloss_value([0.5], [1])
        return abs(ll - math.log(2)) <= 1e-12, f"{auc_cases} AUC cases exact; logloss(1, 0.5) = {ll:.15f}"

    run("metrics: AUC and logloss oracles", metrics)

    def mult_adds():
        est = count_mult_adds(5, 16, 2)
        ok = est["cross"] == 12640 and count_mult_adds(5, 16, 4)["cross"] == 2 * est["cross"]
        detail = [f"closed form n=5,d=16,L=2: {est['cross']}"]
        for n, d, L, h in ((3, 4, 1, 1), (4, 8, 2, 2), (5, 4, 2, 2)):
            c = count_mult_adds(n, d, L, heads=h, instrumented=True)
            ratio = c["cross"] / c["cross_empirical"]
            ok &= 0.5 <= ratio <= 2.0
            detail.append(f"({n},{d},{L}) ratio {ratio:.2f}")
        return ok, "; ".join(detail)

    run("complexity: mult-add count", mult_adds)
    return results, report


def format_results(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  result  detail"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL':6}  {r.detail}")
    return "\n".join(lines)
