import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from artikit.core import JointType, object_to_matrix, shuffle_parts, validate_object
from artikit.errors import FormatError, ParameterError, ShapeError, StructuralError, TrainingError
from artikit.diffusion import (
    Denoiser,
    DenoiserConfig,
    TrainConfig,
    cross_attention_inject,
    diffusion_loss,
    encode_structure,
    forward_noise,
    grad_check,
    load_checkpoint,
    load_trace,
    local_global_attention,
    loss_and_gradients,
    make_noise_schedule,
    moe_layer,
    object_structure,
    pack_batch,
    postprocess,
    sample,
    sample_many,
    save_checkpoint,
    save_trace,
    span_mask,
    top_k_gates,
    train_toy,
)
from artikit.diffusion.model import timestep_embedding
from artikit.diffusion.training import checkpoint_bytes, draw_noise
from artikit.graph import ConnectivityGraph, GraphNode, graph_from_object
from artikit.synthetic import condition_tokens, random_object, toy_dataset

from conftest import revolute_chain

TINY = DenoiserConfig(d_model=8, n_heads=2, n_layers=1, n_experts=4, top_k=2, expert_hidden=16,
                      cond_dim=6, zero_init=False)
SMALL = DenoiserConfig(d_model=16, n_heads=2, n_layers=2, expert_hidden=32, cond_dim=32, zero_init=False)


def batch_for(obj, cfg=SMALL, cond=None, perm=None):
    enc = encode_structure(object_structure(obj), cfg.hops, 0, cfg.global_attention)
    if perm is not None:
        enc = enc.permuted(perm)
    return pack_batch([enc], None if cond is None else [cond])


def run_stages(model, obj, cond=None):
    batch = batch_for(obj, model.config, cond)
    ctx = model.token_context(batch)
    h = model.embed(object_to_matrix(obj), 500.0, batch)
    return model.layers[0], h, ctx


# --- schedule --------------------------------------------------------------------------------

def test_alpha_bar_decreasing_and_final_value():
    sched = make_noise_schedule()
    assert np.all(np.diff(sched.alpha_bars) < 0)
    prod = 1.0
    for k in range(1000):
        prod *= 1.0 - (1e-4 + k * (0.02 - 1e-4) / 999)
    assert sched.alpha_bars[-1] == pytest.approx(prod, rel=1e-12)
    assert abs(sched.alpha_bars[-1] - 4.04e-5) <= 1e-6


def test_schedule_validation():
    with pytest.raises(ParameterError):
        make_noise_schedule(0)
    with pytest.raises(ParameterError):
        make_noise_schedule(10, 0.1, 0.01)
    with pytest.raises(ParameterError):
        make_noise_schedule().alpha_bar(0)


def test_single_step_schedule():
    sched = make_noise_schedule(1, 0.5, 0.5)
    assert sched.alpha_bars.tolist() == [0.5]


@pytest.mark.parametrize("t", [1, 500, 1000])
def test_forward_noise_second_moment(t):
    sched = make_noise_schedule()
    rng = np.random.default_rng(t)
    A0 = np.full((200_000, 1), 0.7)
    At = forward_noise(A0, t, rng.standard_normal(A0.shape), sched)
    ab = sched.alpha_bar(t)
    expected = ab * 0.49 + (1.0 - ab)
    assert abs(np.mean(At ** 2) / expected - 1.0) <= 0.05


def test_forward_noise_modes_and_errors():
    A0 = np.ones((3, 2))
    eps = np.full((3, 2), 2.0)
    assert np.array_equal(forward_noise(A0, 1.0, eps, mode="interp"), A0)
    assert np.array_equal(forward_noise(A0, 0.0, eps, mode="interp"), eps)
    per_row = forward_noise(torch.ones(3, 2, dtype=torch.float64), np.array([0.0, 0.5, 1.0]),
                            torch.full((3, 2), 2.0, dtype=torch.float64), mode="interp")
    assert per_row[:, 0].tolist() == [2.0, 1.5, 1.0]
    sched = make_noise_schedule()
    assert np.array_equal(forward_noise(A0, 10, np.zeros_like(A0), sched), np.sqrt(sched.alpha_bar(10)) * A0)
    with pytest.raises(ShapeError):
        forward_noise(A0, 1, np.ones((2, 2)), make_noise_schedule())
    with pytest.raises(ParameterError):
        forward_noise(A0, 1.5, eps, mode="interp")
    with pytest.raises(ParameterError):
        forward_noise(A0, 1, eps, make_noise_schedule(), mode="cosine")


def test_timestep_embedding_range():
    e = timestep_embedding(torch.tensor([0.0, 500.0, 1000.0], dtype=torch.float64))
    assert e.shape == (3, 16)
    assert torch.all(e.abs() <= 1.0)
    assert not torch.equal(e[0], e[1])


# --- attention ---------------------------------------------------------------------------------

def test_attention_weights_respect_masks():
    model = Denoiser(SMALL)
    obj = revolute_chain(3)
    layer, h, ctx = run_stages(model, obj)
    _, w_local, w_global = local_global_attention(layer, h, ctx, return_weights=True)
    G = model.n_groups
    part = torch.arange(len(obj)).repeat_interleave(G)
    same_part = part[:, None] == part[None, :]
    assert torch.allclose(w_local.sum(-1), torch.ones(1, dtype=torch.float64), atol=1e-12)
    assert torch.all(w_local[:, ~same_part] == 0)
    allowed = torch.tensor([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=torch.bool)[part][:, part]
    assert torch.allclose(w_global.sum(-1), torch.ones(1, dtype=torch.float64), atol=1e-12)
    assert torch.all(w_global[:, ~allowed] == 0)


def test_single_part_local_equals_global():
    model = Denoiser(SMALL)
    layer, h, ctx = run_stages(model, revolute_chain(1))
    _, w_local, w_global = local_global_attention(layer, h, ctx, return_weights=True)
    assert torch.equal(w_local > 0, w_global > 0)


def test_span_mask_checks():
    assert span_mask([(0, 2), (2, 3)], 3).tolist() == [[True, True, False], [True, True, False],
                                                       [False, False, True]]
    with pytest.raises(StructuralError):
        span_mask([(0, 2), (1, 3)], 3)
    with pytest.raises(StructuralError):
        span_mask([(0, 2)], 3)


def test_hops_mask_blocks_information():
    # one layer, hops=1: part 0 never sees part 2 on a three-part chain
    cfg = dataclasses.replace(SMALL, n_layers=1)
    model = Denoiser(cfg)
    obj = revolute_chain(3)
    batch = batch_for(obj, cfg)
    A = torch.as_tensor(object_to_matrix(obj))
    B = A.clone()
    B[2] += 5.0
    out_a, out_b = model(A, 300.0, batch), model(B, 300.0, batch)
    assert torch.equal(out_a[0], out_b[0])
    assert not torch.equal(out_a[1], out_b[1])
    full = Denoiser(dataclasses.replace(cfg, global_attention="full"))
    fb = batch_for(obj, full.config)
    assert not torch.equal(full(A, 300.0, fb)[0], full(B, 300.0, fb)[0])


def test_packed_objects_do_not_interact():
    model = Denoiser(SMALL)
    a, b = toy_dataset()[0][0], toy_dataset()[5][0]
    enc = [encode_structure(object_structure(o)) for o in (a, b)]
    both = model(torch.as_tensor(np.concatenate([object_to_matrix(a), object_to_matrix(b)])),
                 200.0, pack_batch(enc))
    alone = model(torch.as_tensor(object_to_matrix(a)), 200.0, pack_batch(enc[:1]))
    assert torch.allclose(both[:len(a)], alone, atol=1e-12, rtol=0)


# --- cross-attention ---------------------------------------------------------------------------

def test_cross_attention_zero_init_is_identity():
    model = Denoiser(dataclasses.replace(SMALL, zero_init=True))
    obj = toy_dataset()[1][0]
    layer, h, ctx = run_stages(model, obj, condition_tokens("x"))
    assert torch.equal(cross_attention_inject(layer, h, ctx), h)


def test_cross_attention_without_condition_is_identity():
    model = Denoiser(SMALL)
    layer, h, ctx = run_stages(model, toy_dataset()[1][0])
    out, w = cross_attention_inject(layer, h, ctx, return_weights=True)
    assert out is h and w is None


def test_cross_attention_single_token_is_constant_shift():
    model = Denoiser(SMALL)
    layer, h, ctx = run_stages(model, toy_dataset()[1][0], condition_tokens("x", n_tokens=1))
    out, w = cross_attention_inject(layer, h, ctx, return_weights=True)
    assert torch.all(w == 1.0)
    delta = out - h
    assert torch.allclose(delta, delta[:1].expand_as(delta), atol=1e-12)


def test_cross_attention_duplicate_tokens_invariant():
    model = Denoiser(SMALL)
    obj = toy_dataset()[1][0]
    c = condition_tokens("x", n_tokens=3)
    layer, h, ctx = run_stages(model, obj, c)
    _, h2, ctx2 = run_stages(model, obj, np.concatenate([c, c]))
    assert torch.allclose(cross_attention_inject(layer, h, ctx), cross_attention_inject(layer, h2, ctx2),
                          atol=1e-12, rtol=0)


def test_condition_dim_checked():
    model = Denoiser(SMALL)
    with pytest.raises(ShapeError):
        model.token_context(batch_for(toy_dataset()[0][0], SMALL, np.zeros((2, 5))))


# --- mixture of experts ---------------------------------------------------------------------------

def test_top2_of_two_logits():
    g = top_k_gates(torch.tensor([[2.0, 1.0]], dtype=torch.float64), 2)
    assert g[0].tolist() == pytest.approx([0.73106, 0.26894], abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_gates_sum_to_one_and_k1_is_argmax(seed, n_experts):
    logits = torch.as_tensor(np.random.default_rng(seed).standard_normal((7, n_experts)))
    for k in range(1, n_experts + 1):
        g = top_k_gates(logits, k)
        assert torch.allclose(g.sum(-1), torch.ones(7, dtype=torch.float64), atol=1e-9, rtol=0)
        assert torch.all((g > 0).sum(-1) == k)
    one = top_k_gates(logits, 1)
    assert torch.equal(one, torch.nn.functional.one_hot(logits.argmax(-1), n_experts).to(one.dtype))


def test_k1_picks_largest_logit():
    g = top_k_gates(torch.tensor([[0.2, 1.5, -0.3, 0.0]], dtype=torch.float64), 1)
    assert g[0].tolist() == [0.0, 1.0, 0.0, 0.0]


def test_single_expert_is_shared_plus_expert():
    cfg = dataclasses.replace(SMALL, n_experts=1, top_k=1)
    model = Denoiser(cfg)
    layer, h, ctx = run_stages(model, toy_dataset()[3][0])
    out, gates = moe_layer(layer, h, ctx, return_gates=True)
    assert torch.all(gates == 1.0)
    x = layer.norm_moe(h)
    assert torch.allclose(out, h + layer.moe.shared(x) + layer.moe.experts[0](x), atol=1e-12, rtol=0)


def test_gate_ties_prefer_lower_index():
    g = top_k_gates(torch.tensor([[1.0, 1.0, 1.0]], dtype=torch.float64), 1)
    assert g[0].tolist() == [1.0, 0.0, 0.0]


def test_moe_layer_gates():
    model = Denoiser(SMALL)
    layer, h, ctx = run_stages(model, toy_dataset()[3][0])
    out, gates = moe_layer(layer, h, ctx, return_gates=True)
    assert out.shape == h.shape
    assert torch.allclose(gates.sum(-1), torch.ones(len(h), dtype=torch.float64), atol=1e-9)
    assert torch.all((gates > 0).sum(-1) == SMALL.top_k)


# --- the whole denoiser ---------------------------------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    model = Denoiser(SMALL)
    obj, _ = random_object(seed, 5, with_meshes=False)
    shuffled, perm = shuffle_parts(obj, seed, return_permutation=True)
    out = model(torch.as_tensor(object_to_matrix(obj)), 321.0, batch_for(obj))
    out_perm = model(torch.as_tensor(object_to_matrix(shuffled)), 321.0, batch_for(obj, perm=perm))
    assert torch.allclose(out_perm, out[torch.as_tensor(perm)], atol=1e-12, rtol=0)


def test_identical_parts_identical_outputs():
    g = ConnectivityGraph([GraphNode(0, "body"), GraphNode(1, "door", "revolute"),
                           GraphNode(2, "door", "revolute")], [(0, 1), (0, 2)], 0)
    enc = encode_structure(g)
    A = torch.as_tensor(np.random.default_rng(0).standard_normal((3, 20)))
    A[2] = A[1]
    out = Denoiser(SMALL)(A, 77.0, pack_batch([enc]))
    assert out.shape == A.shape
    assert torch.allclose(out[1], out[2], atol=1e-9, rtol=0)


def test_zero_head_loss_is_noise_power():
    model = Denoiser(DenoiserConfig(d_model=16, n_heads=2, n_layers=1, expert_hidden=16))
    objs = [o for o, _ in toy_dataset()]
    batch = pack_batch([encode_structure(object_structure(o)) for o in objs])
    A0 = np.concatenate([object_to_matrix(o) for o in objs])
    sched = make_noise_schedule()
    loss = diffusion_loss(model, A0, batch, sched, seed=4).item()
    _, eps = draw_noise(batch, A0.shape[1], sched, 4)
    assert loss == pytest.approx(float(np.mean(eps ** 2)), abs=1e-15)
    assert abs(loss - 1.0) < 0.1
    assert diffusion_loss(model, A0, batch, sched, seed=4).item() == loss


def test_loss_nonnegative_and_seeded():
    model = Denoiser(SMALL)
    obj = toy_dataset()[4][0]
    batch, A0, sched = batch_for(obj), object_to_matrix(obj), make_noise_schedule()
    values = [diffusion_loss(model, A0, batch, sched, seed=k).item() for k in range(5)]
    assert all(v >= 0 for v in values)
    assert diffusion_loss(model, A0, batch, sched, seed=2).item() == values[2]


def _tiny_problem():
    obj = revolute_chain(4)
    batch = batch_for(obj, TINY, cond=np.random.default_rng(0).standard_normal((3, TINY.cond_dim)))
    return Denoiser(TINY), object_to_matrix(obj), batch


def test_grad_check_tiny_model():
    model, A0, batch = _tiny_problem()
    res = grad_check(model, A0, batch, make_noise_schedule(), h=1e-5, n_params=200)
    assert res.n_checked == 200
    assert res.max_rel_error < 1e-4


def test_dead_path_has_zero_gradient():
    model = Denoiser(TINY)
    obj = revolute_chain(4)
    batch = batch_for(obj, TINY)  # no condition: the cross-attention branch is unused
    _, grads = loss_and_gradients(model, object_to_matrix(obj), batch, make_noise_schedule())
    cross = [n for n in grads if ".cross_attn." in n]
    assert cross and all(not grads[n].any() for n in cross)
    res = grad_check(model, object_to_matrix(obj), batch, make_noise_schedule(), n_params=20, names=cross)
    assert res.max_rel_error == 0.0


def test_unrouted_expert_has_zero_gradient():
    cfg = dataclasses.replace(TINY, top_k=1)
    model = Denoiser(cfg)
    with torch.no_grad():
        model.layers[0].moe.gate.bias[3] = -1e6  # expert 3 never wins the top-1 slot
    obj = revolute_chain(4)
    batch, A0, sched = batch_for(obj, cfg), object_to_matrix(obj), make_noise_schedule()
    _, grads = loss_and_gradients(model, A0, batch, sched)
    dead = [n for n in grads if ".experts.3." in n]
    assert dead and all(not grads[n].any() for n in dead)
    res = grad_check(model, A0, batch, sched, n_params=20, names=dead)
    assert all(abs(a) <= 1e-10 and abs(n) <= 1e-10 for _, _, a, n, _ in res.entries)


def test_grad_check_error_shrinks_with_h():
    model, A0, batch = _tiny_problem()
    sched = make_noise_schedule()
    errors = []
    for h in (1e-3, 1e-4, 1e-5):
        res = grad_check(model, A0, batch, sched, h=h, n_params=30, seed=1)
        # absolute error: the relative one is ruled by near-zero gradients
        errors.append(max(abs(a - n) for _, _, a, n, _ in res.entries))
    assert errors[0] > errors[1] > errors[2]


# --- training --------------------------------------------------------------------------------------

def test_zero_steps_returns_initial_model(tmp_path):
    cfg = dataclasses.replace(SMALL, max_time=1000.0)
    res = train_toy(toy_dataset()[:2], cfg, TrainConfig(steps=0), trace_path=tmp_path / "t.csv")
    assert res.trace == [] and math.isnan(res.smoothed_loss)
    assert checkpoint_bytes(res.model) == checkpoint_bytes(Denoiser(cfg))
    assert load_trace(tmp_path / "t.csv") == []


def test_training_deterministic_and_round_trips(tmp_path):
    conds = [condition_tokens(o.category) for o, _ in toy_dataset()[:3]]
    kw = dict(model_config=SMALL, config=TrainConfig(steps=4, lr=0.05), conds=conds)
    a = train_toy(toy_dataset()[:3], checkpoint_path=tmp_path / "a.ckpt", trace_path=tmp_path / "a.csv", **kw)
    b = train_toy(toy_dataset()[:3], checkpoint_path=tmp_path / "b.ckpt", trace_path=tmp_path / "b.csv", **kw)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert a.trace == b.trace == load_trace(tmp_path / "a.csv")
    restored = load_checkpoint(tmp_path / "a.ckpt")
    assert checkpoint_bytes(restored) == checkpoint_bytes(a.model)


def test_cosine_lr_decay():
    cfg = TrainConfig(steps=5, lr=0.4, lr_min=0.0)
    assert [cfg.lr_at(s) for s in range(1, 6)] == pytest.approx([0.4, 0.34142136, 0.2, 0.05857864, 0.0])
    assert TrainConfig(steps=5, lr=0.4).lr_at(5) == 0.4
    res = train_toy(toy_dataset()[:1], SMALL, TrainConfig(steps=3, lr=0.1, lr_min=0.01))
    assert [row[2] for row in res.trace] == pytest.approx([0.1, 0.055, 0.01])
    with pytest.raises(ParameterError):
        TrainConfig(lr=0.1, lr_min=0.2)


def test_training_rejects_bad_input():
    with pytest.raises(ParameterError):
        train_toy([])
    with pytest.raises(ParameterError):
        train_toy(toy_dataset()[:2], SMALL, TrainConfig(steps=1), conds=[None])
    with pytest.raises(TrainingError) as info:
        train_toy(toy_dataset()[:2], SMALL, TrainConfig(steps=3, divergence_threshold=0.0))
    assert len(info.value.trace) == 1


def test_trace_file_round_trip(tmp_path):
    trace = [(1, 0.1 + 0.2, 1e-3), (2, 1 / 3, 1e-3)]
    save_trace(tmp_path / "t.csv", trace)
    assert load_trace(tmp_path / "t.csv") == trace
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(FormatError):
        load_trace(tmp_path / "bad.csv")


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Denoiser(TINY))
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(path)
    path.write_bytes(b"nope" + data)
    with pytest.raises(FormatError):
        load_checkpoint(path)


# --- sampling --------------------------------------------------------------------------------------

SHORT = make_noise_schedule(40)


@pytest.mark.parametrize("mode", ["ddpm", "interp"])
def test_samples_valid_and_deterministic(mode):
    model = Denoiser(SMALL)
    graphs = [graph_from_object(o) for o, _ in toy_dataset()]
    objs = sample_many(model, graphs, SHORT, seed=3, mode=mode)
    assert all(validate_object(o).ok for o in objs)
    again = sample_many(model, graphs, SHORT, seed=3, mode=mode, chunk=3)
    for a, b in zip(objs, again):
        assert np.allclose(object_to_matrix(a), object_to_matrix(b), atol=1e-10, rtol=0)
    one = sample(model, graphs[0], SHORT, seed=3, mode=mode)
    assert object_to_matrix(one).tobytes() == object_to_matrix(sample(model, graphs[0], SHORT, 3, mode=mode)).tobytes()


def test_sample_respects_graph():
    g = ConnectivityGraph([GraphNode(0, "body"), GraphNode(1, "drawer", "prismatic"),
                           GraphNode(2, "knob", "continuous")], [(0, 1), (1, 2)], 0)
    obj = sample(Denoiser(SMALL), g, SHORT, seed=1)
    assert [p.joint.joint_type for p in obj.parts] == [JointType.FIXED, JointType.PRISMATIC, JointType.CONTINUOUS]
    assert [p.parent_id for p in obj.parts] == [None, 0, 1]
    assert obj.parts[1].joint.range[:2] == (0.0, 0.0)


def test_sample_rejects_moving_root():
    g = ConnectivityGraph([GraphNode(0, "body", "revolute")], [], 0)
    with pytest.raises(StructuralError):
        sample(Denoiser(SMALL), g, SHORT)


def test_postprocess_repairs_raw_rows():
    g = ConnectivityGraph([GraphNode(0, "body"), GraphNode(1, "door", "revolute")], [(0, 1)], 0)
    raw = np.zeros((2, 20))
    raw[:, 12] = 1e-9  # degenerate axis falls back to +z
    raw[1, 15:19] = [1.0, -1.0, 0.3, 0.1]
    raw[1, 19] = 1.7
    raw[:, 3:6] = -0.2
    obj = postprocess(raw, g)
    door = obj.parts[1]
    assert door.state == 1.0
    assert door.joint.range == (-1.0, 1.0, 0.0, 0.0)
    assert door.joint.direction == (0.0, 0.0, 1.0)
    assert door.obb.half_extents == (0.2, 0.2, 0.2)
    with pytest.raises(ParameterError):
        postprocess(np.full((2, 20), np.nan), g)
