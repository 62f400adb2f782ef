import pytest
import torch

from weightgen.arch import ArchSpec, LayerSpec, init_weightset
from weightgen.codec import (
    NormStats,
    TokenMatrix,
    WeightDictionary,
    apply_norm,
    detokenize_layer,
    embed_tokens,
    fit_norm_stats_from_weightsets,
    invert_norm,
    project_tokens,
    tokenize_layer,
)
from weightgen.errors import ConfigurationError, StructuralError
from weightgen.rng import make_stream

from conftest import finite_difference, rel_err


def random_layer_tensors(spec: LayerSpec, gen: torch.Generator) -> dict:
    return {role: torch.randn(shape, generator=gen)
            for role, shape in spec.param_shapes().items()}


def random_spec(kind: str, gen: torch.Generator, name: str = "L") -> LayerSpec:
    def pick(lo, hi):
        return int(torch.randint(lo, hi + 1, (1,), generator=gen))

    if kind == "conv":
        return LayerSpec(name, "conv", n_input=pick(1, 8), n_output=pick(1, 12),
                         kernel_size=pick(1, 5), has_bias=bool(pick(0, 1)))
    if kind == "fc":
        return LayerSpec(name, "fc", n_input=pick(1, 24), n_output=pick(1, 24),
                         has_bias=bool(pick(0, 1)))
    if kind == "attention":
        heads, dv = pick(1, 4), pick(1, 6)
        return LayerSpec(name, "attention", heads=heads, key_dim=pick(1, 6), value_dim=dv,
                         model_width=heads * dv, has_bias=False)
    return LayerSpec(name, "norm", n_output=pick(1, 32),
                     norm_mode="channel" if pick(0, 1) else "layer")


def test_conv_token_shape_matches_stated_formula():
    spec = LayerSpec("c", "conv", n_input=16, n_output=32, kernel_size=3, has_bias=False)
    tm = tokenize_layer(random_layer_tensors(spec, make_stream(0, "t")), spec)
    assert (tm.seq_len, tm.d_layer) == (32, 144)  # n_output tokens of k^2 * n_input


def test_attention_token_shape_matches_stated_formula():
    spec = LayerSpec("a", "attention", heads=4, model_width=64, key_dim=16, value_dim=16,
                     has_bias=False)
    tm = tokenize_layer(random_layer_tensors(spec, make_stream(0, "t")), spec)
    assert (tm.seq_len, tm.d_layer) == (64, 256)  # 2dk+2dv tokens of h*d_trans


def test_fc_bias_folding_adds_one_column():
    spec = LayerSpec("f", "fc", n_input=5, n_output=7)
    tensors = random_layer_tensors(spec, make_stream(0, "t"))
    tm = tokenize_layer(tensors, spec)
    assert (tm.seq_len, tm.d_layer) == (7, 6)
    assert torch.equal(tm.tokens[:, -1], tensors["bias"])


def test_attention_token_orientation():
    # token j < d_k must be the concatenation across heads of column j of Q
    spec = LayerSpec("a", "attention", heads=2, model_width=6, key_dim=2, value_dim=3,
                     has_bias=False)
    packed = torch.randn(spec.param_shapes()["weight"], generator=make_stream(1, "t"))
    tm = tokenize_layer({"weight": packed}, spec)
    q_col0 = torch.cat([packed[h, :, 0] for h in range(2)])
    assert torch.equal(tm.tokens[0], q_col0)
    # first output-matrix token sits right after the Q and K and V blocks
    o_row0 = torch.cat([packed[h, :, 2 * 2 + 3] for h in range(2)])
    assert torch.equal(tm.tokens[2 * 2 + 3], o_row0)


@pytest.mark.parametrize("kind", ["conv", "fc", "attention", "norm"])
def test_roundtrip_exact_100_layers_per_kind(kind):
    gen = make_stream(42, f"round-{kind}")
    for i in range(100):
        spec = random_spec(kind, gen, name=f"{kind}{i}")
        tensors = random_layer_tensors(spec, gen)
        back = detokenize_layer(tokenize_layer(tensors, spec), spec)
        assert set(back) == set(tensors)
        for role in tensors:
            assert torch.equal(back[role], tensors[role]), (spec, role)


def test_shape_law_property_500_random_specs():
    gen = make_stream(7, "shape-law")
    kinds = ("conv", "fc", "attention", "norm")
    for i in range(500):
        kind = kinds[int(torch.randint(4, (1,), generator=gen))]
        spec = random_spec(kind, gen, name=f"s{i}")
        tm = tokenize_layer(random_layer_tensors(spec, gen), spec)
        bias = 1 if spec.has_bias else 0
        if kind == "conv":
            expect = (spec.n_output, spec.kernel_size**2 * spec.n_input + bias)
        elif kind == "fc":
            expect = (spec.n_output, spec.n_input + bias)
        elif kind == "attention":
            expect = (2 * spec.key_dim + 2 * spec.value_dim,
                      spec.heads * spec.model_width)
        else:
            expect = (spec.n_output, 2)
        assert (tm.seq_len, tm.d_layer) == expect
        assert tm.layer_key() == (kind, expect[1])


def test_tokenize_shape_mismatch():
    spec = LayerSpec("c", "conv", n_input=2, n_output=3, kernel_size=3)
    with pytest.raises(StructuralError):
        tokenize_layer({"weight": torch.zeros(3, 2, 5, 5), "bias": torch.zeros(3)}, spec)
    with pytest.raises(StructuralError):
        detokenize_layer(TokenMatrix(torch.zeros(3, 5), "conv", "c"), spec)


def test_zero_tokens_give_zero_tensors():
    spec = LayerSpec("c", "conv", n_input=2, n_output=3, kernel_size=3)
    tm = TokenMatrix(torch.zeros(spec.token_shape()), "conv", "c")
    out = detokenize_layer(tm, spec)
    assert all(torch.equal(t, torch.zeros_like(t)) for t in out.values())


# -- normalization stats ------------------------------------------------------


def test_norm_stats_hand_computed(cnn_arch):
    teachers = [init_weightset(cnn_arch, make_stream(i, "t")) for i in range(3)]
    stats = fit_norm_stats_from_weightsets(teachers)
    # direct computation oracle for one key
    spec = cnn_arch.layer("conv2")
    flat = torch.cat([
        tokenize_layer(ws.layer_tensors("conv2"), spec).tokens.reshape(-1)
        for ws in teachers
    ]).to(torch.float64)
    mean, std = stats.lookup(spec.layer_key())
    assert abs(mean - float(flat.mean())) < 1e-12
    assert abs(std - float(flat.std(unbiased=False))) < 1e-12


def test_norm_stats_empty_pool():
    with pytest.raises(ConfigurationError):
        fit_norm_stats_from_weightsets([])


def test_constant_pool_floors_std_and_roundtrips():
    arch = ArchSpec(
        layers=(LayerSpec("fc", "fc", n_input=3, n_output=4),),
        num_classes=4, input_shape=(1, 1, 3), family="mlp",
    )
    ws = init_weightset(arch, make_stream(0, "w"))
    for t in ws.tensors.values():
        t.fill_(0.25)
    stats = fit_norm_stats_from_weightsets([ws])
    _, std = stats.lookup(("fc", 4))
    assert std == 1e-6
    tm = tokenize_layer(ws.layer_tensors("fc"), arch.layer("fc"))
    back = invert_norm(apply_norm(tm, stats), stats)
    assert torch.allclose(back.tokens, tm.tokens, rtol=1e-6, atol=0)


def test_apply_norm_centers_the_fitting_pool(cnn_arch):
    teachers = [init_weightset(cnn_arch, make_stream(i, "t")) for i in range(3)]
    stats = fit_norm_stats_from_weightsets(teachers)
    for spec in cnn_arch.layers:
        vals = torch.cat([
            apply_norm(tokenize_layer(ws.layer_tensors(spec.name), spec), stats)
            .tokens.reshape(-1).to(torch.float64)
            for ws in teachers
        ])
        if spec.kind == "norm":
            continue  # constant-ish columns, mean still ~0 but std floored
        assert abs(float(vals.mean())) < 1e-6


def test_norm_roundtrip_within_tolerance(cnn_arch):
    teachers = [init_weightset(cnn_arch, make_stream(i, "t")) for i in range(2)]
    stats = fit_norm_stats_from_weightsets(teachers)
    for spec in cnn_arch.layers:
        tm = tokenize_layer(teachers[0].layer_tensors(spec.name), spec)
        back = invert_norm(apply_norm(tm, stats), stats)
        assert torch.allclose(back.tokens, tm.tokens, rtol=1e-6, atol=1e-6)


def test_norm_stats_payload_roundtrip(cnn_arch):
    teachers = [init_weightset(cnn_arch, make_stream(i, "t")) for i in range(2)]
    stats = fit_norm_stats_from_weightsets(teachers)
    clone = NormStats.from_payload(stats.to_payload())
    assert clone.stats == stats.stats


# -- the dimension dictionary --------------------------------------------------


def test_dictionary_shares_entries_for_equal_keys(cnn_arch):
    d = WeightDictionary(cnn_arch, d_model=32)
    # norm1 and norm2 have the same (kind, d_layer) = ("norm", 2)
    assert d.entry(("norm", 2)) is d.entry(("norm", 2))
    keys = {ls.layer_key() for ls in cnn_arch.layers}
    assert len(d.entries) == len(keys)


def test_embed_project_shapes(cnn_arch):
    d = WeightDictionary(cnn_arch, d_model=128)
    spec = cnn_arch.layer("conv2")
    tm = tokenize_layer(
        init_weightset(cnn_arch, make_stream(0, "w")).layer_tensors("conv2"), spec)
    emb = embed_tokens(tm, d)
    assert emb.shape == (spec.token_shape()[0], 128)
    back = project_tokens(emb, d, spec.layer_key(), "conv2")
    assert (back.seq_len, back.d_layer) == spec.token_shape()


def test_zero_in_map_gives_zero_embeddings(cnn_arch):
    d = WeightDictionary(cnn_arch, d_model=16)
    spec = cnn_arch.layer("fc2")
    entry = d.entry(spec.layer_key())
    with torch.no_grad():
        entry.in_map.weight.zero_()
        entry.in_map.bias.zero_()
    tm = tokenize_layer(
        init_weightset(cnn_arch, make_stream(0, "w")).layer_tensors("fc2"), spec)
    assert torch.equal(embed_tokens(tm, d), torch.zeros(spec.token_shape()[0], 16))


def test_missing_dictionary_entry_names_key(cnn_arch):
    d = WeightDictionary(cnn_arch, d_model=16)
    with pytest.raises(ConfigurationError, match="conv.*999"):
        d.entry(("conv", 999))


def test_project_tokens_gradient_matches_finite_differences(cnn_arch):
    d = WeightDictionary(cnn_arch, d_model=8).double()
    spec = cnn_arch.layer("fc2")
    hidden = torch.randn(spec.token_shape()[0], 8, generator=make_stream(5, "h"),
                         dtype=torch.float64)
    entry = d.entry(spec.layer_key())

    def scalar():
        return project_tokens(hidden, d, spec.layer_key()).tokens.sum().item()

    loss = project_tokens(hidden, d, spec.layer_key()).tokens.sum()
    loss.backward()
    w = entry.out_map.weight
    fd = finite_difference(scalar, w.data, (0, 0), eps=1e-6)
    assert rel_err(w.grad[0, 0].item(), fd) <= 1e-4
