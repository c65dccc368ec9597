import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from modnas.autodiff import Tensor
from modnas.derivation import (
    ArchitectureError,
    DegenerateWidthWarning,
    WidthDerivationConfig,
    derive_architecture,
    derive_depth,
    derive_operation,
    derive_width,
    export_arch,
    import_arch,
    instantiate_derived,
    load_fixture,
    replicate_stages,
)
from modnas.metrics import count_params
from modnas.search_space import DEFAULT_DSL, DEFAULT_NL, DEFAULT_USL, OpSpec, Supernet, SupernetConfig, UNetSpec


def brute_force_width(beta, coverage=0.9, q=8):
    """Try every multiple of q; keep the first whose top-M magnitudes reach the coverage."""
    mag = np.abs(np.asarray(beta, dtype=np.float64))
    order = sorted(range(mag.size), key=lambda i: (-mag[i], i))
    for m in range(q, mag.size + 1, q):
        if mag[order[:m]].sum() >= coverage * mag.sum():
            return m, sorted(order[:m])
    return mag.size, sorted(order)


# ---------------------------------------------------------------------------
# operation choice


def test_operation_examples():
    cands = DEFAULT_DSL.candidates[:3]
    assert derive_operation([0.1, 2.0, -1], cands) == cands[1]
    assert derive_operation([0.5, 0.5, 0.5], cands) == cands[0]


def test_operation_errors():
    with pytest.raises(ValueError):
        derive_operation([], [])
    with pytest.raises(ValueError):
        derive_operation([1.0, 2.0], DEFAULT_NL)


@given(arrays(np.float64, 7, elements=st.floats(-10, 10)), st.floats(-100, 100), st.floats(0.1, 10))
def test_operation_invariant_to_shift_and_monotone_maps(alpha, shift, scale):
    base = derive_operation(alpha, DEFAULT_NL)
    top2 = np.sort(alpha)[-2:]
    # a shift may round a near-tie into an exact tie; only distinguishable maxima must survive
    if top2[1] - top2[0] > 1e-9 * (1 + abs(shift)):
        assert derive_operation(alpha + shift, DEFAULT_NL) == base
    assert derive_operation(np.tanh(alpha) * scale, DEFAULT_NL) == derive_operation(np.tanh(alpha), DEFAULT_NL)


# ---------------------------------------------------------------------------
# width choice


def test_width_examples():
    assert derive_width([1.0] * 8 + [0.0] * 8).width == 8
    assert derive_width([1.0] * 16).width == 16
    beta = [0.91] + [0.09 / 15] * 15
    assert derive_width(beta).width == 8
    assert derive_width(beta).kept == list(range(8))


def test_width_keeps_largest_magnitudes_in_ascending_order():
    beta = np.zeros(16)
    beta[[3, 5, 9, 11, 12, 13, 14, 15]] = [-4, 3, 2, 2, 2, 2, 2, 2]
    wc = derive_width(beta)
    assert wc.width == 8 and wc.kept == [3, 5, 9, 11, 12, 13, 14, 15]


def test_width_all_zero_is_flagged():
    with pytest.warns(DegenerateWidthWarning):
        wc = derive_width(np.zeros(16))
    assert wc == (8, list(range(8)))


def test_width_errors():
    with pytest.raises(ValueError):
        derive_width(np.ones(12))
    with pytest.raises(ValueError):
        WidthDerivationConfig(coverage=0)


def test_width_matches_brute_force_on_1000_vectors():
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(1000):
        c = int(rng.choice([8, 16, 32, 64]))
        beta = rng.laplace(0, 1, c) * (rng.random(c) < rng.uniform(0.2, 1))
        if not np.any(beta):
            beta[0] = 1.0
        wc = derive_width(beta)
        mismatches += (wc.width, wc.kept) != brute_force_width(beta)
    assert mismatches == 0


@given(arrays(np.float64, 32, elements=st.floats(-5, 5)).filter(lambda b: np.abs(b).sum() > 1e-6),
       st.floats(0.01, 100))
def test_width_invariant_to_positive_rescaling(beta, k):
    a, b = derive_width(beta), derive_width(beta * k)
    assert a.width == b.width
    # coverage and divisibility hold for the rescaled choice too
    mag = np.abs(beta * k)
    assert b.width % 8 == 0 and mag[b.kept].sum() >= 0.9 * mag.sum() * (1 - 1e-12)


@given(arrays(np.float64, 64, elements=st.floats(-3, 3)).filter(lambda b: np.abs(b).sum() > 1e-6),
       st.sampled_from([1, 2, 3]), st.floats(0.5, 1.0))
def test_width_is_minimal(beta, n, coverage):
    cfg = WidthDerivationConfig(coverage, n)
    wc = derive_width(beta, cfg)
    assert (wc.width, wc.kept) == brute_force_width(beta, coverage, 2 ** n)


# ---------------------------------------------------------------------------
# depth choice


def gam(*rows):
    return [np.array(r, dtype=float) for r in rows]


def test_depth_sequential_chain():
    d = derive_depth(gam([0, 1], [0, 0, 1], [0, 0, 0, 1]))
    assert d.input_paths == [1, 2, 3] and d.live == [1, 2, 3]


def test_depth_ties_prefer_self_path():
    assert derive_depth(gam([0, 0], [0, 0, 0], [0, 0, 0, 0])).input_paths == [1, 2, 3]


def test_depth_bypass_removes_intermediate_layer():
    # layer 2 reads layer 0's output, so layer 1's op is dead
    d = derive_depth(gam([0, 1], [1, 0, 0], [0, 0, 0, 1]))
    assert d.input_paths == [1, 0, 3] and d.live == [3]
    d = derive_depth(gam([0, 1], [0, 5, 0], [0, 0, 0, 1]))
    assert d.input_paths == [1, 1, 3] and d.live == [1, 3]


def test_depth_all_bypass_is_degenerate():
    d = derive_depth(gam([1, 0], [1, 0, 0], [1, 0, 0, 0]))
    assert d.degenerate and d.input_paths == [0, 0, 0]


def test_depth_required_features_keep_skip_producer_alive():
    g = gam([0, 1], [2, 0, 0], [0, 0, 0, 1])
    assert derive_depth(g).live == [3]
    assert derive_depth(g, required=[3, 1]).live == [1, 3]


def test_depth_bad_gamma_length():
    with pytest.raises(ValueError):
        derive_depth(gam([0, 1, 2]))


def brute_force_live(paths, required):
    """Follow chosen paths backwards from every required feature."""
    live = set()
    for r in required:
        f = r
        while f > 0:
            if paths[f - 1] == f:
                live.add(f)
                f -= 1
            else:
                f = paths[f - 1]
    return sorted(live)


@given(st.lists(st.integers(0, 3), min_size=3, max_size=3))
def test_depth_liveness_matches_walk(choices):
    paths = [min(c, ell) for ell, c in enumerate(choices, start=1)]
    g = []
    for ell, p in enumerate(paths, start=1):
        row = np.zeros(ell + 1)
        row[p] = 1.0
        g.append(row)
    for req in ([3], [3, 1]):
        assert derive_depth(g, required=req).live == brute_force_live(paths, req)


# ---------------------------------------------------------------------------
# fixtures and schema


@pytest.mark.parametrize("name", ["modnas_b", "modnas_ar"])
def test_fixture_export_import_export_is_byte_identical(name, tmp_path):
    arch = load_fixture(name)
    text = export_arch(arch)
    again = export_arch(import_arch(text))
    assert text == again
    export_arch(arch, tmp_path / "a.json")
    assert export_arch(import_arch(tmp_path / "a.json")) == text


B_ROWS = [  # (block, resolution, op label, c_in, c_out) as transcribed
    ("stem", 128, "conv3x3", 1, 48), ("stem", 128, "conv3x3", 48, 48),
    ("eb1", 128, "conv3x3", 48, 40), ("eb1", 128, "residual_block3x3", 40, 40),
    ("eb1", 128, "residual_block3x3", 40, 40), ("eb1", 128, "strided_conv3x3", 40, 24),
    ("eb2", 64, "conv3x3", 24, 32), ("eb2", 64, "separable_conv5x5", 32, 40),
    ("eb2", 64, "skip", 40, 40), ("eb2", 64, "interp_nearest", 40, 32),
    ("eb3", 32, "conv5x5", 32, 40), ("eb3", 32, "skip", 40, 40),
    ("eb3", 32, "residual_block3x3", 40, 40), ("eb3", 32, "interp_nearest", 40, 32),
    ("db1", 16, "conv5x5", 32, 48), ("db1", 16, "dilated_conv3x3_d2", 48, 48),
    ("db1", 16, "skip", 48, 48), ("db1", 16, "interp_bilinear", 48, 40),
    ("db2", 32, "conv3x3", 72, 36), ("db2", 32, "skip", 36, 36),
    ("db2", 32, "dilated_conv5x5_d2", 36, 40), ("db2", 32, "skip", 40, 40),
    ("db2", 32, "interp_bilinear", 40, 40),
    ("db3", 64, "conv3x3", 72, 36), ("db3", 64, "residual_block3x3", 36, 32),
    ("db3", 64, "skip", 32, 32), ("db3", 64, "residual_block3x3", 32, 32),
    ("db3", 64, "interp_bilinear", 32, 32),
    ("db4", 128, "conv3x3", 56, 28), ("db4", 128, "residual_block3x3", 28, 40),
    ("db4", 128, "residual_block3x3", 40, 40), ("db4", 128, "skip", 40, 40),
    ("head", 128, "conv1x1", 40, 1),
]


def rows(arch):
    return [(b.name, l.resolution, l.op.label, l.c_in, l.c_out) for b, l in arch.stages[0].layers()]


def test_fixture_b_matches_table_rows():
    assert rows(load_fixture("modnas_b")) == B_ROWS


def test_fixture_ar_shape():
    arch = load_fixture("modnas_ar")
    r = rows(arch)
    assert len(r) == 33 and r[0] == ("stem", 128, "conv3x3", 1, 48)
    fusions = [(l.c_in, l.c_out) for _, l in arch.stages[0].layers() if l.role == "fusion"]
    assert all(ci > co for ci, co in fusions)


@pytest.mark.parametrize("name", ["modnas_b", "modnas_ar"])
def test_fixture_per_layer_input_sizes(name):
    arch = load_fixture(name)
    net = instantiate_derived(arch)
    trace = []
    out = net(Tensor(np.zeros((1, 1, 128, 128), dtype=np.float32)), trace)
    assert out.shape == (1, 1, 128, 128)
    layers = list(arch.stages[0].layers())
    assert len(trace) == len(layers)
    for (bname, _, layer, shape), (blk, expected) in zip(trace, layers):
        assert bname == blk.name and layer is expected
        assert shape == (1, layer.c_in, layer.resolution, layer.resolution), (bname, layer.op.label)


def test_replicated_fixture_instantiates():
    net = instantiate_derived(replicate_stages(load_fixture("modnas_b"), 2))
    assert net(Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32))).shape == (1, 1, 16, 16)


@pytest.mark.parametrize("mutate, match", [
    (lambda d: d.update(format="other"), "modnas-arch"),
    (lambda d: d["stages"][0]["blocks"][1]["layers"][0].update(c_in=7), None),
    (lambda d: d["stages"][0]["blocks"][1]["layers"][3].update(stride=1), "stride"),
    (lambda d: d["stages"][0].update(delta=1.5), "delta"),
    (lambda d: d["stages"][0]["blocks"][1]["layers"][1].update(input_path=5), None),
    (lambda d: d["stages"][0]["blocks"].pop(2), None),
    (lambda d: d["stages"][0]["blocks"][5]["layers"][0]["skip_source"].update(block="eb9"), None),
])
def test_import_rejects_schema_violations(mutate, match):
    doc = load_fixture("modnas_b").to_dict()
    mutate(doc)
    with pytest.raises(ArchitectureError, match=match):
        import_arch(json.dumps(doc))


def test_import_rejects_bad_json():
    with pytest.raises(ArchitectureError):
        import_arch("{not json")


# ---------------------------------------------------------------------------
# derivation from supernet states


def supernet(c=8, stages=2, seed=0):
    return Supernet(SupernetConfig(stages=stages, unet=UNetSpec(init_channels=c)), seed)


def test_untrained_state_gives_default_architecture():
    net = supernet(c=16)
    arch = derive_architecture(net.state, input_size=32)
    for blk, l in arch.stages[0].layers():
        if l.role == "normal":
            assert l.op == DEFAULT_NL.candidates[0] and l.c_out == 16 and l.input_path is not None
            assert l.input_path == blk.layers.index(l) + (0 if blk.fusion is None else 0) + (1 if blk.fusion is None else 0)
        if l.role == "sampler":
            expected = DEFAULT_DSL if blk.kind == "encoder" else DEFAULT_USL
            assert l.op == expected.candidates[0] and l.c_out == 16
    assert [s.delta for s in arch.stages] == [0.5, 0.5]
    assert arch.notes == []


def test_untrained_derivation_is_full_width_full_depth():
    net = supernet(c=8)
    arch = derive_architecture(net.state, input_size=16)
    assert all(l.input_path == i + 1 for b in arch.stages[0].blocks for i, l in enumerate(b.normal))
    assert all(l.kept_channels == list(range(8)) for _, l in arch.stages[0].layers() if l.kept_channels)


def craft_state_for(arch_fixture, c=48):
    """Set alpha, beta and gamma of a fresh supernet so derivation reproduces the fixture's choices."""
    net = Supernet(SupernetConfig(stages=1, unet=UNetSpec(init_channels=c)), 0)
    arch = net.state.arch
    for blk in arch_fixture.stages[0].blocks:
        if blk.kind not in ("encoder", "decoder"):
            continue
        for ell, layer in enumerate(blk.normal, start=1):
            g = arch[f"{blk.name}.l{ell}.gamma"].data
            g[:] = 0
            g[layer.input_path] = 3.0
            _pick(arch, f"{blk.name}.l{ell}", DEFAULT_NL, layer)
        if blk.sampler is not None:
            _pick(arch, f"{blk.name}.s", DEFAULT_DSL if blk.kind == "encoder" else DEFAULT_USL, blk.sampler)
    return net


def _pick(store, prefix, cands, layer):
    idx = cands.candidates.index(layer.op)
    a = store[f"{prefix}.alpha"].data
    a[:] = 0
    a[idx] = 4.0
    if layer.op.kind != "skip":
        beta = store[f"{prefix}.beta.{idx}"].data
        beta[:] = 0
        beta[: layer.c_out] = 1.0


def test_crafted_state_reproduces_reference_rows():
    fixture = load_fixture("modnas_b")
    net = craft_state_for(fixture)
    derived = derive_architecture(net.state, input_size=128)
    got = list(derived.stages[0].layers())
    want = list(fixture.stages[0].layers())
    assert len(got) == len(want)
    for (gb, g), (wb, w) in zip(got, want):
        assert (gb.name, g.role, g.op, g.stride, g.resolution) == (wb.name, w.role, w.op, w.stride, w.resolution)
        if g.role in ("normal", "sampler") and g.op.kind != "skip":
            assert g.c_out == w.c_out, (gb.name, g.op.label)
    # fusion widths follow the halving rule (72 // 2 rounded up to 8) instead of the table's 36/36/28
    assert [l.c_out for _, l in got if l.role == "fusion"] == [40, 40, 40]


def test_crafted_state_derives_same_table_twice():
    fixture = load_fixture("modnas_b")
    a = derive_architecture(craft_state_for(fixture).state, input_size=128)
    b = derive_architecture(craft_state_for(fixture).state, input_size=128)
    assert export_arch(a) == export_arch(b)


def random_trained_state(rng, c=8, stages=2):
    net = supernet(c=c, stages=stages, seed=int(rng.integers(1 << 30)))
    for name, t in net.state.arch.items():
        if ".beta." in name:
            t.data[:] = rng.laplace(0, 0.3, t.shape) * (rng.random(t.shape) < 0.8)
        else:
            t.data[:] = rng.normal(0, 1.5, t.shape)
    return net


def test_200_random_states_instantiate():
    rng = np.random.default_rng(77)
    x = Tensor(np.zeros((1, 1, 16, 16), dtype=np.float32))
    for i in range(200):
        c = 8 if i % 2 else 16
        net = random_trained_state(rng, c=c)
        with warnings.catch_warnings():
            warnings.simplefilter("error", DegenerateWidthWarning)
            arch = derive_architecture(net.state, input_size=16)
        for _, l in arch.stages[0].layers():
            if l.kept_channels is not None:
                assert l.c_out % 8 == 0 and len(l.kept_channels) == l.c_out
            if l.role == "fusion":
                assert l.c_out % 8 == 0
        assert instantiate_derived(arch, seed=i)(x).shape == x.shape
        assert count_params(arch) - arch.T <= arch.T * net.stage_weight_count()


def test_derived_never_exceeds_full_width_topology():
    rng = np.random.default_rng(5)
    for _ in range(20):
        net = random_trained_state(rng, c=16)
        arch = derive_architecture(net.state, input_size=16)
        full = arch.to_dict()
        # widen every parametric layer back to the supernet width
        for st_ in full["stages"]:
            for b in st_["blocks"]:
                for layer in b["layers"]:
                    if layer["role"] in ("normal", "sampler", "fusion", "stem"):
                        layer["c_in"] = 16 if layer["c_in"] != 1 else 1
                        if layer["role"] == "fusion":
                            layer["c_in"] = 32
                            layer["skip_channels"] = 16
                        layer["c_out"] = 16
                        layer.pop("kept_channels", None)
                    if layer["role"] == "head":
                        layer["c_in"] = 16
        assert count_params(arch) <= count_params(import_arch(full))


def test_degenerate_notes_recorded():
    net = supernet(c=8)
    for ell in (1, 2, 3):
        g = net.state.arch[f"db1.l{ell}.gamma"].data
        g[:] = 0
        g[0] = 5.0
    net.state.arch["eb1.l1.beta.0"].data[:] = 0
    arch = derive_architecture(net.state, input_size=16)
    assert any(n.startswith("db1:") for n in arch.notes)
    assert all(l.op.kind == "skip" for l in arch.stages[0].block("db1").normal)
    # eb1.l1 is live (it feeds the skip connection) and its width collapses to the minimum
    assert any(n.startswith("eb1.l1:") for n in arch.notes)


def test_derivation_rejects_bad_sizes():
    with pytest.raises(ValueError):
        derive_architecture(supernet(c=8).state, input_size=20)
    with pytest.raises(ValueError):
        derive_architecture(supernet(c=12).state, input_size=16)


def test_derived_weights_are_fresh_but_seeded():
    arch = load_fixture("modnas_b")
    a, b = instantiate_derived(arch, 3), instantiate_derived(arch, 3)
    assert all(np.array_equal(x.data, y.data) for (_, x), (_, y) in zip(a.params.items(), b.params.items()))
    assert float(a.deltas()[0].data[0]) == pytest.approx(0.5)


def test_opspec_equality_is_structural():
    assert OpSpec("conv", 3) == DEFAULT_NL.candidates[0]
