import itertools

import numpy as np
import pytest
import torch

from cotrain_vla.model.checkpoint import CheckpointError, load_checkpoint, read_tensors, save_checkpoint, write_tensors
from cotrain_vla.model.config import DESK, REFERENCE_SCALE, TINY, ModelConfig
from cotrain_vla.model.grad import backward
from cotrain_vla.model.network import build_model, is_action_param
from cotrain_vla.model.sequence import (
    Role,
    batch_attention_mask,
    build_attention_mask,
    build_sequence,
    collate,
    discretize_proprio,
)
from cotrain_vla.train.loss import combined_loss

from conftest import tiny_batch, tiny_sequence

PREFIX = {Role.IMAGE, Role.PROMPT, Role.PROPRIO}
TARGET = {Role.FAST, Role.TEXT}


def rule(roles, i, j):
    """Reference reading of the attention rules, one pair at a time."""
    ri, rj = roles[i], roles[j]
    if ri in PREFIX:
        return rj in PREFIX
    if ri in TARGET:
        return rj in PREFIX or (rj in TARGET and j <= i)
    if ri == Role.NOISY:
        return rj in PREFIX or rj == Role.NOISY
    return i == j


def test_mask_matches_rule_interpreter_exhaustively():
    alphabet = list(Role)
    for n in range(1, 7):
        seqs = list(itertools.product(alphabet, repeat=n))
        batched = batch_attention_mask(torch.tensor([[int(r) for r in s] for s in seqs])).numpy()
        for k, roles in enumerate(seqs):
            expect = np.array([[rule(roles, i, j) for j in range(n)] for i in range(n)])
            assert np.array_equal(build_attention_mask(roles), expect), roles
            assert np.array_equal(batched[k], expect), roles


def test_fast_payload_never_reaches_action_outputs():
    model = build_model(TINY, seed=1, dtype=torch.float64)
    rng = np.random.default_rng(4)
    targets = [(5, Role.TEXT), (7, Role.FAST), (9, Role.FAST), (2, Role.FAST)]
    base = tiny_sequence(rng, targets=targets)
    _, ya = model(collate([base], TINY.horizon).to(torch.float64))
    for trial in range(5):
        toks = base.tokens.copy()
        fast = np.nonzero(base.roles == Role.FAST)[0]
        toks[fast] = rng.integers(0, TINY.vocab_size, size=len(fast))
        pert = build_sequence.__globals__["MixedSequence"](**{**base.__dict__, "tokens": toks})
        _, ya2 = model(collate([pert], TINY.horizon).to(torch.float64))
        assert torch.equal(ya, ya2)


def test_prefix_outputs_ignore_targets_and_noise():
    model = build_model(TINY, seed=2, dtype=torch.float64)
    rng = np.random.default_rng(0)
    s = tiny_sequence(rng, targets=[(3, Role.TEXT)] * 4)
    b1 = collate([s], TINY.horizon).to(torch.float64)
    x1, _, _ = model.hidden(b1)
    b2 = collate([s], TINY.horizon).to(torch.float64)
    b2.noisy = b2.noisy + 5.0
    b2.tokens[0, -TINY.horizon - 4:-TINY.horizon] = 11
    x2, _, _ = model.hidden(b2)
    n_prefix = int(np.isin(s.roles, list(PREFIX)).sum())
    assert torch.equal(x1[:, :n_prefix], x2[:, :n_prefix])


def test_target_logits_read_from_previous_position():
    rng = np.random.default_rng(1)
    s = tiny_sequence(rng, targets=[(4, Role.TEXT), (6, Role.FAST)], noisy=False)
    b = collate([s])
    first = int(np.nonzero(np.isin(s.roles, list(TARGET)))[0][0])
    assert b.pred_i.tolist() == [first - 1, first]
    assert b.labels.tolist() == [4, 6]


def test_positions_follow_block_layout():
    off = DESK.block_offsets()
    s = build_sequence(DESK, np.zeros((2, 16, 16, 3)), [3, 4], [100, 101], [(5, Role.TEXT)])
    assert s.positions.tolist() == list(range(32)) + [off["prompt"], off["prompt"] + 1,
                                                       off["proprio"], off["proprio"] + 1, off["target"]]


def test_sequence_validation():
    with pytest.raises(ValueError):
        build_sequence(TINY, np.zeros((1, 4, 4, 3)), [1] * (TINY.max_prompt + 1), [])
    with pytest.raises(ValueError):
        build_sequence(TINY, np.zeros((1, 4, 4, 3)), [1], [], [(1, Role.PROMPT)])
    with pytest.raises(ValueError):
        build_sequence(TINY, np.zeros((1, 4, 4, 3)), [1], [], noisy=np.zeros((TINY.horizon, TINY.d_max)))


def test_proprio_bins():
    assert discretize_proprio([-1.0, 0.0, 0.999, 1.0]) == [0, 32, 63, 63]
    with pytest.raises(ValueError):
        discretize_proprio([np.nan])


def test_config_checks():
    with pytest.raises(ValueError):
        ModelConfig(width=10, num_heads=4).validate()
    # the reference preset is recorded only; its head count does not divide the width
    with pytest.raises(ValueError):
        REFERENCE_SCALE.validate()
    assert ModelConfig.from_dict(DESK.to_dict()) == DESK


def _perturbed(cfg, with_action, seed):
    model = build_model(cfg, seed=seed, with_action=with_action, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=g, dtype=torch.float64))
    return model


@pytest.mark.parametrize("alpha", [0.0, 10.0])
def test_gradients_match_central_differences(alpha):
    with_action = alpha > 0
    model = _perturbed(TINY, with_action, seed=3)
    batch = tiny_batch(seed=5, noisy=with_action)
    loss_fn = lambda m: combined_loss(m, batch, alpha).total  # noqa: E731
    grads = backward(model, loss_fn)
    eps = 1e-6
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat, g = p.view(-1), grads[name].view(-1)
            for k in range(flat.numel()):
                old = flat[k].item()
                flat[k] = old + eps
                up = loss_fn(model).item()
                flat[k] = old - eps
                down = loss_fn(model).item()
                flat[k] = old
                fd = (up - down) / (2 * eps)
                err = abs(fd - g[k].item()) / max(abs(fd), abs(g[k].item()), 1e-6)
                worst = max(worst, err)
                assert err < 1e-3, (name, k, fd, g[k].item())
    assert worst < 1e-3


def test_unused_parameters_get_zero_gradients():
    model = _perturbed(TINY, True, seed=0)
    batch = tiny_batch(seed=1, noisy=False)
    grads = backward(model, lambda m: combined_loss(m, batch, 0.0).total)
    assert all(torch.count_nonzero(g) == 0 for n, g in grads.items() if is_action_param(n))


def test_action_expert_added_only_in_posttraining(tmp_path):
    pre = build_model(TINY, seed=0, with_action=False)
    assert not any(is_action_param(n) for n, _ in pre.named_parameters())
    save_checkpoint(tmp_path / "pre.bin", pre, {"step": 0})
    names = set(read_tensors(tmp_path / "pre.bin"))
    assert not any(is_action_param(n) for n in names)
    model, _ = load_checkpoint(tmp_path / "pre.bin")
    model.add_action_expert(seed=1)
    added = {n for n, _ in model.named_parameters()} - names
    assert added and all(is_action_param(n) for n in added)
    assert any(n.startswith("layers.0.act.") for n in added) and any(n.startswith("action.") for n in added)


def test_checkpoint_round_trip(tmp_path):
    model = build_model(TINY, seed=4)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-2)
    batch = tiny_batch(seed=2, dtype=torch.float32)
    combined_loss(model, batch, 1.0).total.backward()
    opt.step()
    save_checkpoint(tmp_path / "m.bin", model, {"step": 1}, opt)
    back, meta = load_checkpoint(tmp_path / "m.bin")
    assert meta["step"] == 1 and meta["version"] == 1
    for (n, a), (_, b) in zip(model.named_parameters(), back.named_parameters()):
        assert torch.equal(a, b), n
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:4] == b"CVLA"
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        read_tensors(tmp_path / "bad.bin")
    (tmp_path / "long.bin").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError):
        read_tensors(tmp_path / "long.bin")


def test_tensor_file_is_little_endian_float32(tmp_path):
    write_tensors(tmp_path / "t.bin", {"w": np.array([[1.0, -2.0]])})
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw.endswith(np.array([1.0, -2.0], dtype="<f4").tobytes())
    assert read_tensors(tmp_path / "t.bin")["w"].shape == (1, 2)


def test_batches_without_noise_need_no_expert():
    model = build_model(TINY, seed=0, with_action=False, dtype=torch.float64)
    logits, ya = model(tiny_batch(noisy=False))
    assert ya is None and logits.shape[1] == TINY.vocab_size
    with pytest.raises(ValueError):
        model(tiny_batch(noisy=True))
