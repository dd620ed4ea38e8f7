"""The named experiments of the runner.

Each experiment has parameter defaults, a validation step that builds every
model object once (so bad parameters fail before sampling), and a run step
that maps module-level batch functions over keyed streams and merges their
results in batch order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .cascade import CascadeParams, build_cascades, leaf_wedges
from .exchangeability import (
    HierarchicalKernel,
    coordinate_plant,
    hierarchical_draws,
    hierarchical_exchangeability_test,
    independence_panel,
    independence_test,
    planted_panel,
    sample_pure_states,
)
from .gibbs import (
    P_MAX,
    GibbsEnsemble,
    enumerate_gibbs,
    fit_growth_exponent,
    metropolis_replicas,
    probe_row,
    sample_ksat,
    sample_log_partition,
    sample_perturbation,
    schedule_strength,
    spins_to_index,
)
from .identities import (
    TestFunctionSpec,
    default_phi_panel,
    ggi_cluster_means,
    ggi_from_cluster_means,
    mixture_law_check,
    reweighting_batch,
    reweighting_merge,
    group_residual_rows,
    normalizer_residual_rows,
)
from .point_process import pd_tilted_batch
from .replicas import CascadeSource, SingleAtomSource, TwoAtomSource
from .rsb import Configuration, RSBDiscretization, canonical_assignment, check_ultrametric, extract_configuration
from .runner import ConfigError, Figure, Metric, Table, map_batches
from .stats import ks_uniform, pooled_chisquare
from .streams import stream
from .tree import index_to_label, parse_label


@dataclass(frozen=True)
class Experiment:
    defaults: dict
    validate: object
    run: object


def _split(total: int, batches: int) -> list:
    batches = max(1, min(int(batches), int(total)))
    base, extra = divmod(int(total), batches)
    return [base + (1 if i < extra else 0) for i in range(batches)]


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def _positive_int(params: dict, *keys):
    for k in keys:
        v = params[k]
        _require(isinstance(v, int) and not isinstance(v, bool) and v >= 1, f"{k} must be a positive integer")


# ------------------------------------------------------------------ builders

CASCADE_KEYS = {"r", "zetas", "d", "q"}
KERNEL_DEFAULTS = {"kind": "mah2", "c": [0.5, 0.5, 0.5], "b0": 0.3, "s": 1.0}
SOURCE_DEFAULTS = {
    "cascade": {"r": 2, "zetas": [0.3, 0.6], "d": 50, "q": None, "kernel": None, "M": 4, "groups_per_measure": 500},
    "two_atom": {"w": 0.5, "q_cross": 0.0, "M": 4},
    "single_atom": {"q_star": 1.0, "M": 4},
}


def make_cascade(spec: dict) -> CascadeParams:
    _require(isinstance(spec, dict), "cascade parameters must be an object")
    unknown = set(spec) - CASCADE_KEYS
    _require(not unknown, f"unknown cascade parameters {sorted(unknown)}")
    q = spec.get("q")
    return CascadeParams(int(spec["r"]), tuple(spec["zetas"]), int(spec["d"]), None if q is None else tuple(q))


def make_kernel(spec: dict | None, r: int) -> HierarchicalKernel:
    spec = dict(KERNEL_DEFAULTS if spec is None else {**KERNEL_DEFAULTS, **spec})
    unknown = set(spec) - set(KERNEL_DEFAULTS)
    _require(not unknown, f"unknown kernel parameters {sorted(unknown)}")
    c = tuple(float(v) for v in spec["c"])
    if len(c) != r + 1:
        c = (c + (c[-1],) * (r + 1))[: r + 1]
    return HierarchicalKernel(spec["kind"], c, float(spec["b0"]), float(spec["s"]))


def make_source(spec: dict):
    _require(isinstance(spec, dict) and spec.get("type") in SOURCE_DEFAULTS,
             f"source.type must be one of {sorted(SOURCE_DEFAULTS)}")
    kind = spec["type"]
    body = {k: v for k, v in spec.items() if k != "type"}
    unknown = set(body) - set(SOURCE_DEFAULTS[kind])
    _require(not unknown, f"unknown {kind} source parameters {sorted(unknown)}")
    full = {**SOURCE_DEFAULTS[kind], **body}
    if kind == "cascade":
        params = make_cascade({k: full[k] for k in CASCADE_KEYS})
        _positive_int(full, "M", "groups_per_measure")
        return CascadeSource(params, make_kernel(full["kernel"], params.r), full["M"], full["groups_per_measure"])
    if kind == "two_atom":
        _require(0 < full["w"] < 1, "two_atom.w must lie in (0, 1)")
        _require(-1 <= full["q_cross"] < 1, "two_atom.q_cross must lie in [-1, 1)")
        return TwoAtomSource(float(full["w"]), float(full["q_cross"]), int(full["M"]))
    _require(-1 <= full["q_star"] <= 1, "single_atom.q_star must lie in [-1, 1]")
    return SingleAtomSource(float(full["q_star"]), int(full["M"]))


def _source_disc(source, spec):
    if spec is not None:
        return RSBDiscretization.from_grid(tuple(spec))
    if isinstance(source, CascadeSource):
        return RSBDiscretization.from_grid(source.params.q)
    return RSBDiscretization.from_grid((0.0, 1.0))


# ---------------------------------------------------------------------- cascade


def _cascade_overlap_batch(spec, seed, index, builds, pairs):
    params = make_cascade(spec)
    rng = stream(seed, "cascade", "overlap", index)
    batch = build_cascades(params, builds, rng)
    leaves = batch.sample_leaves(2 * pairs, rng)
    wd = leaf_wedges(params, np.stack([leaves[:, :pairs], leaves[:, pairs:]], axis=-1))[..., 0, 1]
    freq = np.stack([(wd == p).mean(axis=1) for p in range(params.r + 1)], axis=1)
    norm = float(np.abs(batch.V[-1].sum(axis=1) - (1.0 - batch.residual_mass)).max())
    return freq, batch.residual_mass, norm


def _cascade_decomposition_batch(spec, seed, index, builds, top):
    params = make_cascade(spec)
    rng = stream(seed, "cascade", "decomposition", index)
    batch = build_cascades(params, builds, rng)
    ratios, _ = batch.child_ratios(0)
    return ratios[:, :top], batch.V[params.r - 1][:, 0]


def _cascade_validate(p):
    make_cascade(p["cascade"])
    _positive_int(p, "builds", "pairs_per_build", "batches", "decomposition_builds", "top", "tilted_base")
    _require(set(p["checks"]) <= {"overlap_law", "decomposition"}, "checks must be overlap_law and/or decomposition")


def _cascade_run(p, seed, workers):
    params = make_cascade(p["cascade"])
    r = params.r
    metrics, tables, figures = [], [], []
    if "overlap_law" in p["checks"]:
        parts = map_batches(
            _cascade_overlap_batch,
            [(p["cascade"], seed, i, b, p["pairs_per_build"]) for i, b in enumerate(_split(p["builds"], p["batches"]))],
            workers,
        )
        freq = np.concatenate([x[0] for x in parts])
        residual = float(np.concatenate([x[1] for x in parts]).mean())
        norm = max(x[2] for x in parts)
        target = params.wedge_probabilities
        samples = freq.shape[0] * p["pairs_per_build"]
        rows = []
        for k in range(r + 1):
            est = float(freq[:, k].mean())
            se = float(freq[:, k].std(ddof=1) / np.sqrt(len(freq)))
            tol = 3 * se + 2 * residual
            metrics.append(Metric(f"overlap_law_p{k}", est, se, tol, abs(est - target[k]) <= tol, samples,
                                  note=f"target {target[k]:.6g}"))
            rows.append({"p": k, "empirical": est, "se": se, "target": float(target[k])})
        metrics.append(Metric("leaf_mass_normalization", norm, None, 1e-12, norm <= 1e-12, freq.shape[0],
                              note="max |sum of leaf masses - (1 - residual)|"))
        metrics.append(Metric("residual_mass", residual, None, None, None, freq.shape[0]))
        tables.append(Table("overlap_law", ["p", "empirical", "se", "target"], rows))
        figures.append(Figure("overlap_law", _plot_overlap_law))
    if "decomposition" in p["checks"]:
        parts = map_batches(
            _cascade_decomposition_batch,
            [(p["cascade"], seed, i, b, p["top"]) for i, b in enumerate(_split(p["decomposition_builds"], p["batches"]))],
            workers,
        )
        ratios = np.concatenate([x[0] for x in parts])
        parent = np.concatenate([x[1] for x in parts])
        x = params.zetas[r - 1]
        a = params.zetas[r - 2] if r >= 2 else 0.0
        ref, _, ess = pd_tilted_batch(x, a, params.d, len(ratios), stream(seed, "cascade", "tilted"), base=p["tilted_base"])
        rows = []
        for k in range(p["top"]):
            ks = stats.ks_2samp(ratios[:, k], ref[:, k])
            metrics.append(Metric(f"child_ratio_ks_top{k + 1}", float(ks.pvalue), None, 0.01, bool(ks.pvalue > 0.01),
                                  len(ratios), note=f"KS statistic {ks.statistic:.4g}; reference ESS {ess:.0f}"))
        for k in range(min(p["top"], 3)):
            for j, v in enumerate(np.sort(ratios[:, k])[:: max(1, len(ratios) // 200)]):
                rows.append({"series": "cascade", "rank": k + 1, "value": float(v)})
            for j, v in enumerate(np.sort(ref[:, k])[:: max(1, len(ref) // 200)]):
                rows.append({"series": "reference", "rank": k + 1, "value": float(v)})
        rho = float(np.corrcoef(ratios[:, 0], parent)[0, 1])
        n = len(ratios)
        half = float(np.tanh(stats.norm.ppf(0.995) / np.sqrt(n - 3)))
        metrics.append(Metric("ratio_parent_correlation", rho, float(1 / np.sqrt(n - 3)), half, abs(rho) <= half, n,
                              note="99% Fisher interval half-width around 0"))
        tables.append(Table("child_ratio_quantiles", ["series", "rank", "value"], rows))
        figures.append(Figure("child_ratios", _plot_child_ratios))
    return metrics, tables, figures


def _plot_overlap_law(ax, tables):
    rows = tables["overlap_law"].rows
    p = [r["p"] for r in rows]
    ax.bar(np.array(p) - 0.2, [r["empirical"] for r in rows], 0.4, yerr=[3 * r["se"] for r in rows], label="empirical")
    ax.bar(np.array(p) + 0.2, [r["target"] for r in rows], 0.4, label="zeta_p - zeta_(p-1)")
    ax.set_xlabel("wedge depth p")
    ax.set_ylabel("probability")
    ax.legend()


def _plot_child_ratios(ax, tables):
    rows = tables["child_ratio_quantiles"].rows
    for rank in sorted({r["rank"] for r in rows}):
        for series, style in (("cascade", "-"), ("reference", "--")):
            v = np.array([r["value"] for r in rows if r["rank"] == rank and r["series"] == series])
            ax.plot(v, np.linspace(0, 1, len(v)), style, label=f"{series} #{rank}")
    ax.set_xlabel("child ratio")
    ax.set_ylabel("ECDF")
    ax.legend(fontsize=7)


# ---------------------------------------------------------------------- ggtest


def _panel(spec) -> list:
    fs = [TestFunctionSpec(f["kind"], tuple(tuple(e) for e in f["F"])) for f in spec["functions"]]
    out = []
    for n in spec["n"]:
        for pw in spec["p"]:
            for f in fs:
                if f.replicas <= n:
                    out.append((int(n), int(pw), f))
    return out


def _gg_batch(source_spec, panel_spec, seed, tag, index, measures, mixture):
    source = make_source(source_spec)
    panel = _panel(panel_spec)
    n_rep = max(n for n, _, _ in panel) + 1
    groups = source.draw(measures, n_rep, stream(seed, "ggtest", tag, index))
    cms = [ggi_cluster_means(groups, f, n, pw) for n, pw, f in panel]
    mix = None
    if mixture:
        res = mixture_law_check(groups, 2, _source_disc(source, None), zeta=source.zeta)
        mix = (res.distance, {k: (v["count"], v["empirical"].tolist(), v["predicted"].tolist()) for k, v in res.cells.items()})
    return cms, groups.residual * measures, groups.size, mix


def _gg_validate(p):
    make_source(p["source"])
    make_source(p["negative_control"]["source"])
    _positive_int(p, "measures", "batches")
    _positive_int(p["negative_control"], "measures")
    panel = _panel(p["panel"])
    _require(len(panel) > 0, "empty test-function panel")
    _require(all(n >= 2 and pw >= 1 for n, pw, _ in panel), "panel needs n >= 2 and p >= 1")


def _gg_collect(p, source_spec, measures, seed, tag, workers, mixture=False):
    panel = _panel(p["panel"])
    parts = map_batches(
        _gg_batch,
        [(source_spec, p["panel"], seed, tag, i, m, mixture and i == 0) for i, m in enumerate(_split(measures, p["batches"]))],
        workers,
    )
    samples = sum(x[2] for x in parts)
    residual = sum(x[1] for x in parts) / measures
    out = []
    for j, (n, pw, f) in enumerate(panel):
        cm = np.concatenate([x[0][j] for x in parts])
        out.append(((n, pw, f), ggi_from_cluster_means(cm, n, samples)))
    return out, residual, parts[0][3]


def _gg_run(p, seed, workers):
    metrics, rows = [], []
    results, residual, mix = _gg_collect(p, p["source"], p["measures"], seed, "main", workers, mixture=True)
    for (n, pw, f), e in results:
        tol = 3 * e.se + 2 * residual
        name = f"gg[n={n},p={pw},f={f.label()}]"
        metrics.append(Metric(name, e.estimate, e.se, tol, abs(e.estimate) <= tol, e.samples, note=f"{e.clusters} measures"))
        rows.append({"source": "main", "n": n, "p": pw, "f": f.label(), "estimate": e.estimate, "se": e.se})
    metrics.append(Metric("residual_mass", residual, None, None, None, p["measures"]))
    neg = p["negative_control"]
    nres, _, _ = _gg_collect(p, neg["source"], neg["measures"], seed, "negative", workers)
    z = []
    for (n, pw, f), e in nres:
        z.append(abs(e.estimate) / e.se if e.se > 0 else (np.inf if e.estimate != 0 else 0.0))
        rows.append({"source": "negative", "n": n, "p": pw, "f": f.label(), "estimate": e.estimate, "se": e.se})
    zmax = float(max(z))
    metrics.append(Metric("negative_control_max_z", zmax, None, 5.0, zmax > 5.0, nres[0][1].samples,
                          note="must exceed 5 s.e. for at least one entry"))
    if mix is not None:
        metrics.append(Metric("mixture_law_tv_n2", float(mix[0]), None, None, None, 0,
                              note="count-weighted TV distance, first batch"))
    return metrics, [Table("gg_panel", ["source", "n", "p", "f", "estimate", "se"], rows)], [Figure("gg_zscores", _plot_gg)]


def _plot_gg(ax, tables):
    for src, marker in (("main", "o"), ("negative", "x")):
        rows = [r for r in tables["gg_panel"].rows if r["source"] == src]
        z = [r["estimate"] / r["se"] if r["se"] > 0 else 0.0 for r in rows]
        ax.plot(range(len(z)), z, marker, label=src)
    ax.axhline(3, color="grey", lw=0.5)
    ax.axhline(-3, color="grey", lw=0.5)
    ax.set_xlabel("panel entry")
    ax.set_ylabel("defect / s.e.")
    ax.legend()


# ------------------------------------------------------------------ ultrametric


def _ultra_batch(spec, seed, index, count, n, tol):
    params = make_cascade(spec)
    d, r = params.d, params.r
    disc = RSBDiscretization.from_grid(params.q)
    rng = stream(seed, "ultrametric", index)
    batch = build_cascades(params, count, rng)
    idx = batch.sample_leaves(n, rng)
    wed = leaf_wedges(params, idx)
    q = np.asarray(params.q)
    ultra = trip = 0
    clusters = []
    for b in range(count):
        m = q[wed[b]]
        np.fill_diagonal(m, 1.0)
        ultra += check_ultrametric(m, tol).passed
        lw = np.stack([batch.V[k][b, idx[b] // d ** (r - k)] for k in range(1, r + 1)], axis=1)
        conf = extract_configuration(m, disc, leaf_weights=lw)
        planted = [index_to_label(int(j), d, r) for j in idx[b]]
        trip += conf.assignment == canonical_assignment(planted)
        clusters.append(len(conf.leaves()))
    return ultra, trip, clusters


def _ultra_validate(p):
    make_cascade(p["cascade"])
    _positive_int(p, "matrices", "replicas", "batches")
    _require(p["tol"] >= 0, "tol must be >= 0")


def _ultra_run(p, seed, workers):
    parts = map_batches(
        _ultra_batch,
        [(p["cascade"], seed, i, c, p["replicas"], p["tol"]) for i, c in enumerate(_split(p["matrices"], p["batches"]))],
        workers,
    )
    total = p["matrices"]
    ultra = sum(x[0] for x in parts) / total
    trip = sum(x[1] for x in parts) / total
    clusters = [c for x in parts for c in x[2]]
    metrics = [
        Metric("ultrametric_pass_rate", ultra, None, 1.0, ultra == 1.0, total),
        Metric("roundtrip_rate", trip, None, 1.0, trip == 1.0, total, note="up to canonical sibling relabelling"),
    ]
    counts = np.bincount(clusters)
    rows = [{"leaves_occupied": k, "count": int(c)} for k, c in enumerate(counts) if c]
    return metrics, [Table("occupied_leaves", ["leaves_occupied", "count"], rows)], [Figure("occupied_leaves", _plot_occupied)]


def _plot_occupied(ax, tables):
    rows = tables["occupied_leaves"].rows
    ax.bar([r["leaves_occupied"] for r in rows], [r["count"] for r in rows])
    ax.set_xlabel("distinct leaves among the replicas")
    ax.set_ylabel("matrices")


# ------------------------------------------------------------------------ tilt


def _tilt_tier(rng, pairs, dims, scale, pin):
    """Residuals for ``pairs`` random ``(a, b, x)``, cycling through the dimensions in ``dims``."""
    group = np.empty(pairs)
    ident = np.empty(pairs)
    for j, k in enumerate(dims):
        rows = np.arange(j, pairs, len(dims))
        m = len(rows)
        w = rng.dirichlet(np.ones(k + 1), size=m)
        x, rest = w[:, :k], w[:, k]
        a = rng.uniform(-scale, scale, size=(m, k))
        b = rng.uniform(-scale, scale, size=(m, k))
        if pin:
            for v in (a, b):
                v[np.arange(m), rng.integers(k, size=m)] = scale * rng.choice([-1.0, 1.0], size=m)
        group[rows] = group_residual_rows(a, b, x, rest)
        ident[rows] = normalizer_residual_rows(a, x, rest)
    return float(group.max()), float(ident.max()), list(zip(group, ident))


def _tilt_validate(p):
    _positive_int(p, "pairs", "stress_pairs")
    _require(all(isinstance(k, int) and k >= 1 for k in p["dims"]), "dims must be positive integers")
    _require(p["scale"] > 0 and p["stress_scale"] > 0, "scales must be positive")


def _tilt_run(p, seed, workers):
    metrics, rows = [], []
    tiers = (("", p["pairs"], p["scale"], False, p["tol"]), ("stress_", p["stress_pairs"], p["stress_scale"], True, p["stress_tol"]))
    for prefix, pairs, scale, pin, tol in tiers:
        g, h, res = _tilt_tier(stream(seed, "tilt", prefix or "base"), pairs, p["dims"], scale, pin)
        metrics.append(Metric(f"{prefix}group_law_residual", g, None, tol, g <= tol, pairs))
        metrics.append(Metric(f"{prefix}normalizer_residual", h, None, tol, h <= tol, pairs,
                              note="|log Delta_a(T_-a x) + log Delta_-a(x)|"))
        for gi, hi in res[:: max(1, pairs // 1000)]:
            rows.append({"tier": prefix.rstrip("_") or "base", "group_law": float(gi), "normalizer": float(hi)})
    return metrics, [Table("tilt_residuals", ["tier", "group_law", "normalizer"], rows)], [Figure("tilt_residuals", _plot_tilt)]


def _plot_tilt(ax, tables):
    rows = tables["tilt_residuals"].rows
    for tier in sorted({r["tier"] for r in rows}):
        v = np.array([max(r["normalizer"], 1e-18) for r in rows if r["tier"] == tier])
        ax.hist(np.log10(v), bins=40, alpha=0.6, label=tier)
    ax.set_xlabel("log10 normalizer residual")
    ax.legend()


# -------------------------------------------------------------------- reweighting (experiment "theorem2")


def _parse_b(spec: dict) -> dict:
    return {parse_label(k): float(v) for k, v in spec.items()}


def _make_config(spec) -> Configuration:
    import json

    return Configuration.from_json(json.dumps({**spec, "schema_version": 1}))


def _t2_batch(source_spec, conf_spec, b_spec, grid, zeta, seed, tag, index, measures):
    source = make_source(source_spec)
    conf = _make_config(conf_spec)
    disc = _source_disc(source, grid)
    rng = stream(seed, "theorem2", tag, index)
    return reweighting_batch(source, conf, _parse_b(b_spec), default_phi_panel(), measures, rng, disc=disc, zeta=zeta)


def _t2_validate(p):
    conf = _make_config(p["configuration"])
    _require(len(conf.vertices()) == 3, "the built-in panel needs a configuration with two non-root vertices")
    for spec in (p["source"], p["negative_control"]["source"]):
        make_source(spec)
    _positive_int(p, "measures", "batches")
    _positive_int(p["negative_control"], "measures")
    for b in p["b_vectors"]:
        bb = _parse_b(b)
        _require(set(bb) <= set(conf.vertices()), f"b has labels outside the configuration: {sorted(b)}")
        _require(all(abs(v) <= p["b_max"] for v in bb.values()), f"|b| must be <= {p['b_max']}")


def _t2_collect(p, source_spec, grid, zeta, b_spec, tag, measures, seed, workers):
    parts = map_batches(
        _t2_batch,
        [(source_spec, p["configuration"], b_spec, grid, zeta, seed, tag, i, m) for i, m in enumerate(_split(measures, p["batches"]))],
        workers,
    )
    return reweighting_merge(parts)


def _t2_run(p, seed, workers):
    metrics, rows = [], []
    for j, b in enumerate(p["b_vectors"]):
        res = _t2_collect(p, p["source"], p["grid"], p["zeta"], b, f"b{j}", p["measures"], seed, workers)
        for name, lhs, rhs, diff, se in zip(res.names, res.lhs, res.rhs, res.diff, res.se):
            tol = 3 * se + 2 * res.residual
            metrics.append(Metric(f"reweighting[b{j}:{name}]", float(diff), float(se), float(tol), bool(abs(diff) <= tol), res.samples,
                                  note=f"lhs {lhs:.6g} rhs {rhs:.6g}"))
            rows.append({"source": "main", "b": j, "phi": name, "lhs": float(lhs), "rhs": float(rhs), "diff": float(diff), "se": float(se)})
        metrics.append(Metric(f"event_probability[b{j}]", res.prob_event, None, None, None, res.samples))
    metrics.append(Metric("residual_mass", res.residual, None, None, None, res.clusters))
    neg = p["negative_control"]
    b = neg.get("b", p["b_vectors"][-1])
    nres = _t2_collect(p, neg["source"], neg.get("grid"), neg.get("zeta"), b, "negative", neg["measures"], seed, workers)
    z = [abs(d) / s if s > 0 else (np.inf if d != 0 else 0.0) for d, s in zip(nres.diff, nres.se)]
    for name, lhs, rhs, diff, se in zip(nres.names, nres.lhs, nres.rhs, nres.diff, nres.se):
        rows.append({"source": "negative", "b": -1, "phi": name, "lhs": float(lhs), "rhs": float(rhs), "diff": float(diff), "se": float(se)})
    metrics.append(Metric("negative_control_max_z", float(max(z)), None, 5.0, max(z) > 5.0, nres.samples))
    table = Table("reweighting_panel", ["source", "b", "phi", "lhs", "rhs", "diff", "se"], rows)
    return metrics, [table], [Figure("reweighting_sides", _plot_t2)]


def _plot_t2(ax, tables):
    rows = [r for r in tables["reweighting_panel"].rows if r["source"] == "main"]
    ax.errorbar([r["lhs"] for r in rows], [r["rhs"] for r in rows], yerr=[3 * r["se"] for r in rows], fmt="o", ms=3)
    lo = min(min(r["lhs"], r["rhs"]) for r in rows)
    hi = max(max(r["lhs"], r["rhs"]) for r in rows)
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.5)
    ax.set_xlabel("left side")
    ax.set_ylabel("right side")


# ------------------------------------------------------------- exchangeability


def _exch_batch(p, seed, tag, index, trials):
    rng = stream(seed, "exchangeability", tag, index)
    d, r = p["d"], p["r"]
    kernel = make_kernel(p["kernel"], r)
    out = []
    for _ in range(trials):
        if tag == "null":
            X = hierarchical_draws(d, r, p["K"], p["N"], p["M"], kernel, rng)
        else:
            X = coordinate_plant(d, r, p["plant_K"])
        res = hierarchical_exchangeability_test(X, d, r, p["B"], rng, level=p["level"])
        out.append((list(res.pvalues.values()), res.verdict, list(res.pvalues)))
    return out


def _exch_validate(p):
    _positive_int(p, "d", "r", "K", "N", "M", "B", "trials", "plant_trials", "plant_K", "batches")
    make_kernel(p["kernel"], p["r"])
    _require(0 < p["level"] < 1, "level must lie in (0, 1)")


def _exch_run(p, seed, workers):
    null = [x for part in map_batches(_exch_batch, [(p, seed, "null", i, t) for i, t in enumerate(_split(p["trials"], p["batches"]))], workers) for x in part]
    plant = [x for part in map_batches(_exch_batch, [(p, seed, "plant", i, t) for i, t in enumerate(_split(p["plant_trials"], p["batches"]))], workers) for x in part]
    names = null[0][2]
    P = np.array([x[0] for x in null])
    level = p["level"] / len(names)
    metrics, rows = [], []
    for j, name in enumerate(names):
        ks = ks_uniform(P[:, j])
        metrics.append(Metric(f"uniformity_ks[{name}]", ks, None, level, ks > level, len(P),
                              note=f"KS p-value; Bonferroni level {p['level']}/{len(names)}"))
        rows.extend({"statistic": name, "pvalue": float(v)} for v in P[:, j])
    power = float(np.mean([not x[1] for x in plant]))
    metrics.append(Metric("plant_power", power, None, p["power_target"], power >= p["power_target"], len(plant)))
    metrics.append(Metric("null_rejection_rate", float(np.mean([not x[1] for x in null])), None, None, None, len(null)))
    return metrics, [Table("null_pvalues", ["statistic", "pvalue"], rows)], [Figure("null_pvalues", _plot_pvalues("null_pvalues"))]


def _plot_pvalues(table):
    def draw(ax, tables):
        rows = tables[table].rows
        for name in sorted({r["statistic"] for r in rows}):
            ax.hist([r["pvalue"] for r in rows if r["statistic"] == name], bins=20, range=(0, 1), histtype="step", label=name)
        ax.set_xlabel("p-value")
        ax.legend(fontsize=7)

    return draw


# ---------------------------------------------------------------- independence


def _indep_batch(p, seed, index, trials):
    rng = stream(seed, "independence", index)
    params = make_cascade(p["cascade"])
    kernel = make_kernel(p["kernel"], params.r)
    out = []
    for _ in range(trials):
        smp = sample_pure_states(params, p["d"], p["N"], p["M"], kernel, p["K"], rng)
        res = independence_test(independence_panel(smp), rng, B=p["B"], level=p["level"])
        plant = independence_test(planted_panel(smp, rng, noise_sd=p["plant_noise"]), rng, B=p["B"], level=p["level"])
        out.append((res.pvalues, res.verdict, plant.verdict, smp.restarts))
    return out


def _indep_validate(p):
    params = make_cascade(p["cascade"])
    _positive_int(p, "d", "N", "M", "K", "B", "trials", "batches")
    _require(params.r == p["r"], "r must match the cascade depth")
    _require(p["d"] <= params.d, "d cannot exceed the cascade branching")
    make_kernel(p["kernel"], params.r)


def _indep_run(p, seed, workers):
    res = [x for part in map_batches(_indep_batch, [(p, seed, i, t) for i, t in enumerate(_split(p["trials"], p["batches"]))], workers) for x in part]
    keep = float(np.mean([x[1] for x in res]))
    power = float(np.mean([not x[2] for x in res]))
    metrics = [
        Metric("non_rejection_rate", keep, None, p["keep_target"], keep >= p["keep_target"], len(res),
               note=f"Bonferroni over the panel at level {p['level']}"),
        Metric("planted_power", power, None, p["power_target"], power >= p["power_target"], len(res)),
        Metric("restarts", float(sum(x[3] for x in res)), None, None, None, len(res)),
    ]
    rows = [{"statistic": k, "pvalue": float(v)} for x in res for k, v in x[0].items()]
    for name in sorted({r["statistic"] for r in rows}):
        ks = ks_uniform([r["pvalue"] for r in rows if r["statistic"] == name])
        metrics.append(Metric(f"pvalue_uniformity[{name}]", ks, None, None, None, len(res)))
    return metrics, [Table("independence_pvalues", ["statistic", "pvalue"], rows)], [Figure("independence_pvalues", _plot_pvalues("independence_pvalues"))]


# ----------------------------------------------------------- ksat-concentration


def _x_weights(p):
    x = np.asarray(p["x"], dtype=float)
    return x if len(x) else np.ones(P_MAX)


def _sandwich_batch(p, seed, N, index, count):
    rng = stream(seed, "ksat", "sandwich", N, index)
    s = schedule_strength(N, p["gamma"])
    x = _x_weights(p)
    out = []
    for _ in range(count):
        inst = sample_ksat(N, p["K"], p["alpha"], rng)
        F0 = enumerate_gibbs(GibbsEnsemble(inst, p["beta"])).free_energy
        vals = []
        for _ in range(p["pairs"]):
            pert = sample_perturbation(N, x, s, rng)
            fp = enumerate_gibbs(GibbsEnsemble(inst, p["beta"], pert)).free_energy
            fm = enumerate_gibbs(GibbsEnsemble(inst, p["beta"], pert.negated())).free_energy
            vals.append(0.5 * (fp + fm))
        out.append(float(np.mean(vals)) - F0)
    return s, out


def _probe_batch(p, seed, N, index, trials):
    rng = stream(seed, "ksat", "probe", N, index)
    s = schedule_strength(N, p["gamma"])
    family = {"model": "ksat", "K": p["K"], "alpha": p["alpha"]}
    return s, sample_log_partition(family, N, p["beta"], s, trials, rng, _x_weights(p))


def _mcmc_batch(p, seed, index):
    rng = stream(seed, "ksat", "mcmc", index)
    N = p["mcmc_N"]
    inst = sample_ksat(N, p["K"], p["alpha"], rng)
    pert = sample_perturbation(N, _x_weights(p), schedule_strength(N, p["gamma"]), rng)
    exact = enumerate_gibbs(GibbsEnsemble(inst, p["beta"], pert)).probabilities
    chains = metropolis_replicas(GibbsEnsemble(inst, p["beta"], pert, mode="mcmc"), p["mcmc_chains"], p["mcmc_sweeps"], rng,
                                 burn_in=p["mcmc_burn_in"])
    counts = np.bincount(spins_to_index(chains.replicas), minlength=2**N)
    return pooled_chisquare(counts, exact).pvalue, chains.acceptance_rate, chains.energy_autocorrelation


def _ksat_validate(p):
    _positive_int(p, "K", "pairs", "instances", "probe_trials", "mcmc_N", "mcmc_chains", "mcmc_sweeps", "batches")
    _require(isinstance(p["mcmc_instances"], int) and p["mcmc_instances"] >= 0, "mcmc_instances must be >= 0")
    _require(p["mcmc_burn_in"] >= 0, "mcmc_burn_in must be >= 0")
    _require(p["beta"] >= 0 and p["alpha"] > 0, "need beta >= 0 and alpha > 0")
    _require(all(N <= 16 for N in p["sandwich_N"]), "sandwich sizes must be <= 16")
    _require(all(N <= 24 for N in p["probe_N"]) and len(p["probe_N"]) != 1, "probe needs no sizes or >= 2 sizes <= 24")
    _require(all(N >= 2 for N in [*p["sandwich_N"], *p["probe_N"]]), "sizes must be >= 2")
    _require(p["mcmc_N"] <= 12, "mcmc_N must be <= 12")
    schedule_strength(8, p["gamma"])
    _require(len(p["x"]) in (0, P_MAX), f"x must be empty or have {P_MAX} entries")


def _ksat_run(p, seed, workers):
    metrics, srows, prows = [], [], []
    for N in p["sandwich_N"]:
        parts = map_batches(_sandwich_batch, [(p, seed, N, i, c) for i, c in enumerate(_split(p["instances"], p["batches"]))], workers)
        s = parts[0][0]
        gaps = np.array([g for part in parts for g in part[1]])
        bound = 3 * s * s / (2 * N)
        lo, hi = float(gaps.min()), float(gaps.max())
        metrics.append(Metric(f"sandwich_lower[N={N}]", lo, None, 0.0, lo >= 0.0, len(gaps), note="min over instances of F_pert - F"))
        metrics.append(Metric(f"sandwich_upper[N={N}]", hi / bound, None, 1.0, hi <= bound, len(gaps), note="max gap / (3 s^2 / 2N)"))
        srows.extend({"N": N, "gap": float(g), "bound": bound} for g in gaps)
    rows = []
    for N in p["probe_N"]:
        parts = map_batches(_probe_batch, [(p, seed, N, i, c) for i, c in enumerate(_split(p["probe_trials"], p["batches"]))], workers)
        phis = np.concatenate([x[1] for x in parts])
        row = probe_row(N, parts[0][0], phis, p["alpha"])
        rows.append(row)
        prows.append({"N": N, "s": row.s, "mean_phi": row.mean_phi, "abs_dev": row.abs_dev, "se": row.se, "ratio": row.ratio})
        metrics.append(Metric(f"abs_deviation[N={N}]", row.abs_dev, row.se, None, None, row.trials,
                              note=f"ratio to s + sqrt(alpha N): {row.ratio:.4g}"))
    if rows:
        slope, se = fit_growth_exponent(rows)
        metrics.append(Metric("growth_exponent", slope, se, 0.5 + 2 * se, slope <= 0.5 + 2 * se, sum(r.trials for r in rows)))
    mc = map_batches(_mcmc_batch, [(p, seed, i) for i in range(p["mcmc_instances"])], workers)
    for i, (pv, acc, ac) in enumerate(mc):
        metrics.append(Metric(f"metropolis_chisq[instance={i}]", float(pv), None, 0.01, pv > 0.01, p["mcmc_chains"],
                              note=f"acceptance {acc:.3f}; lag-1 autocorrelation {ac:.3f}"))
    tables = [Table("sandwich_gaps", ["N", "gap", "bound"], srows), Table("concentration", ["N", "s", "mean_phi", "abs_dev", "se", "ratio"], prows)]
    figures = []
    if prows:
        figures.append(Figure("concentration", _plot_concentration))
    if srows:
        figures.append(Figure("sandwich", _plot_sandwich))
    return metrics, tables, figures


def _plot_concentration(ax, tables):
    rows = tables["concentration"].rows
    N = np.array([r["N"] for r in rows], dtype=float)
    ax.errorbar(N, [r["abs_dev"] for r in rows], yerr=[2 * r["se"] for r in rows], fmt="o")
    ref = rows[0]["abs_dev"] * np.sqrt(N / N[0])
    ax.plot(N, ref, "--", label="N^(1/2) reference")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("E|phi - E phi|")
    ax.legend()


def _plot_sandwich(ax, tables):
    rows = tables["sandwich_gaps"].rows
    for N in sorted({r["N"] for r in rows}):
        ax.hist([r["gap"] / r["bound"] for r in rows if r["N"] == N], bins=30, histtype="step", label=f"N={N}")
    ax.set_xlabel("gap / (3 s^2 / 2N)")
    ax.legend()


# ------------------------------------------------------------------- registry

EXPERIMENTS = {
    "cascade": Experiment(
        {"cascade": {"r": 2, "zetas": [0.3, 0.6], "d": 50, "q": None}, "checks": ["overlap_law"], "builds": 10000,
         "pairs_per_build": 100, "batches": 20, "decomposition_builds": 10000, "top": 3, "tilted_base": 200000},
        _cascade_validate, _cascade_run),
    "ggtest": Experiment(
        {"source": {"type": "cascade"}, "panel": {"n": [2, 3, 4], "p": [1, 2, 3], "functions": [{"kind": "spin_product", "F": []}]},
         "measures": 2000, "batches": 20, "negative_control": {"source": {"type": "two_atom"}, "measures": 100000}},
        _gg_validate, _gg_run),
    "ultrametric": Experiment(
        {"cascade": {"r": 2, "zetas": [0.3, 0.6], "d": 10, "q": None}, "matrices": 1000, "replicas": 8, "tol": 0.0, "batches": 10},
        _ultra_validate, _ultra_run),
    "tilt": Experiment(
        {"pairs": 10000, "stress_pairs": 10000, "dims": [1, 2, 3, 5, 8], "scale": 5.0, "stress_scale": 30.0, "tol": 1e-12,
         "stress_tol": 1e-9},
        _tilt_validate, _tilt_run),
    "theorem2": Experiment(
        {"source": {"type": "cascade", "r": 1, "zetas": [0.5], "d": 50, "M": 2, "groups_per_measure": 100},
         "configuration": {"r": 1, "tree": [[], []], "assignment": ["1", "1", "2"]},
         "b_vectors": [{}], "b_max": 1.0, "grid": None, "zeta": None, "measures": 10000, "batches": 20,
         "negative_control": {"source": {"type": "two_atom", "w": 0.7, "M": 2}, "measures": 100000, "grid": [0.0, 1.0]}},
        _t2_validate, _t2_run),
    "exchangeability": Experiment(
        {"d": 2, "r": 2, "K": 200, "N": 4, "M": 16, "kernel": {"kind": "mah", "c": [0.5, 0.5, 0.5], "b0": 0.2}, "B": 999,
         "level": 0.01, "trials": 500, "plant_trials": 100, "plant_K": 200, "power_target": 0.99, "batches": 10},
        _exch_validate, _exch_run),
    "independence": Experiment(
        {"cascade": {"r": 2, "zetas": [0.3, 0.6], "d": 10, "q": None}, "d": 2, "r": 2, "N": 4, "M": 16,
         "kernel": {"kind": "mah2", "c": [0.5, 0.5, 0.5], "b0": 0.0}, "K": 100, "B": 499, "level": 0.01, "trials": 1000,
         "plant_noise": 0.1, "keep_target": 0.97, "power_target": 0.99, "batches": 10},
        _indep_validate, _indep_run),
    "ksat-concentration": Experiment(
        {"K": 2, "alpha": 1.0, "beta": 1.0, "gamma": 0.3, "x": [], "sandwich_N": [8, 12, 16], "instances": 100, "pairs": 8,
         "probe_N": [8, 12, 16, 20], "probe_trials": 200, "mcmc_instances": 10, "mcmc_N": 10, "mcmc_chains": 20000,
         "mcmc_sweeps": 100, "mcmc_burn_in": 100, "batches": 10},
        _ksat_validate, _ksat_run),
}
