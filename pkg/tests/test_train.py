import json
import math

import numpy as np
import pytest

from dirlcc import autodiff as ad
from dirlcc.autodiff import Tensor
from dirlcc.config import TrainConfig, dump_config, load_config, parse_config_text, preset
from dirlcc.errors import ContractError, DimensionError, FormatError, NumericError
from dirlcc.losses import caption_loss, caption_nll, total_loss
from dirlcc.model import CaptionModel, make_batch
from dirlcc.optim import AdamState, adam_step, clip_global_norm
from dirlcc.scenes import build_vocab, generate_dataset
from dirlcc.train import (
    CKPT_MAGIC,
    TrainingAborted,
    batch_indices,
    load_checkpoint,
    roll_pair,
    save_checkpoint,
    train,
)

TINY = TrainConfig(d_model=8, word_dim=6, heads=2, layers=1, batch_size=4, max_iters=6, lr=1e-3)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(16, 5, grid_size=3, channels=5)


# ------------------------------------------------------------------- losses


def test_caption_loss_examples():
    onehot = np.eye(4)[[1, 2, 3]]
    assert caption_loss(Tensor(onehot), [1, 2, 3]).item() == 0.0
    uniform = np.full((3, 4), 0.25)
    assert caption_loss(Tensor(uniform), [0, 1, 2]).item() == pytest.approx(math.log(4), abs=1e-15)
    assert caption_loss(Tensor([[0.5, 0.5]]), [0]).item() == pytest.approx(0.6931471805599453, abs=1e-15)


def test_caption_loss_masking_and_sum():
    probs = Tensor(np.array([[0.5, 0.5], [0.25, 0.75]]))
    masked = caption_loss(probs, [0, 1], mask=[True, False])
    assert masked.item() == pytest.approx(math.log(2))
    summed = caption_loss(probs, [0, 1], reduction="sum")
    assert summed.item() == pytest.approx(math.log(2) - math.log(0.75))
    with pytest.raises(ContractError):
        caption_loss(probs, [0, 1], mask=[False, False])
    with pytest.raises(DimensionError):
        caption_loss(probs, [0, 1, 1])


def test_logit_and_probability_forms_agree():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 5, 7)) * 4
    targets = rng.integers(0, 7, size=(2, 5))
    mask = rng.random((2, 5)) > 0.3
    a = caption_nll(Tensor(logits), targets, mask).item()
    b = caption_loss(ad.softmax(Tensor(logits)), targets, mask).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_total_loss_weights():
    cap, d, c = Tensor(1.5), Tensor(2.0), Tensor(4.0)
    assert total_loss(cap, d, c, 0.0, 0.0).item() == 1.5
    assert total_loss(cap, d, c, 0.03, 0.05).item() == pytest.approx(1.5 + 0.06 + 0.2)
    with pytest.raises(ContractError):
        total_loss(cap, d, c, -1.0, 0.0)


def test_paper_presets():
    dc = preset("clevr-dc")
    assert (dc.lambda_d, dc.lambda_c, dc.batch_size, dc.lr) == (0.03, 0.05, 128, 2e-4)
    spot = preset("spot")
    assert (spot.lambda_d, spot.lambda_c, spot.batch_size, spot.lr) == (0.5, 0.004, 64, 1e-4)
    cc = preset("clevr-change")
    assert (cc.lambda_d, cc.lambda_c) == (0.5, 0.3)
    ier = preset("ier")
    assert (ier.lambda_d, ier.lambda_c, ier.batch_size) == (0.001, 0.05, 16)
    assert TrainConfig().alpha == 0.003 and TrainConfig().tau == 0.5
    assert (TrainConfig().d_model, TrainConfig().word_dim) == (512, 300)


# -------------------------------------------------------------------- adam


def test_adam_zero_grad_keeps_params_and_decays_moments():
    p = {"w": np.array([1.0, -2.0])}
    st = AdamState({"w": np.array([0.1, 0.1])}, {"w": np.array([0.2, 0.2])}, 3)
    adam_step(p, {"w": np.zeros(2)}, st, 0.1)
    np.testing.assert_allclose(st.m["w"], 0.09)
    np.testing.assert_allclose(st.v["w"], 0.2 * 0.999)
    # moments from earlier steps still move the parameters; start fresh to check
    q = {"w": np.array([1.0, -2.0])}
    adam_step(q, {"w": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(q["w"], [1.0, -2.0])


def test_adam_first_step_is_bounded_by_lr():
    g = np.array([1e-3, -5.0, 30.0, 0.0])
    p = {"w": np.zeros(4)}
    adam_step(p, {"w": g}, AdamState(), 0.01)
    assert np.all(np.abs(p["w"]) <= 0.01 * (1 + 1e-6))
    np.testing.assert_allclose(p["w"][:3], -0.01 * np.sign(g[:3]), rtol=1e-4)


def test_adam_quadratic_bowl_decreases():
    x = {"x": np.array([1.0])}
    st = AdamState()
    seen = []
    for _ in range(30):
        adam_step(x, {"x": 2 * x["x"]}, st, 0.1)
        seen.append(abs(x["x"][0]))
    assert all(b < a for a, b in zip(seen, seen[1:10]))


def test_adam_rejects_bad_grads_without_mutating():
    p = {"a": np.ones(2), "b": np.ones(2)}
    st = AdamState()
    with pytest.raises(NumericError, match="'b'"):
        adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.inf])}, st, 0.1)
    assert st.t == 0 and st.m == {}
    np.testing.assert_array_equal(p["a"], 1.0)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(g, 1.0) == 5.0
    assert np.sqrt(g["a"] ** 2 + g["b"] ** 2)[0] == pytest.approx(1.0)


# ------------------------------------------------------------------ config


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("preset = synthetic  # base bundle\n\nlambda_d = 0.1\nccr = off\n")
    cfg = load_config(path, {"seed": "7"})
    assert (cfg.lambda_d, cfg.ccr, cfg.seed, cfg.d_model) == (0.1, False, 7, 32)
    assert load_config_round_trip(cfg, tmp_path) == cfg


def load_config_round_trip(cfg, tmp_path):
    p = tmp_path / "dump.cfg"
    p.write_text(dump_config(cfg))
    return load_config(p)


def test_config_errors():
    with pytest.raises(ContractError):
        parse_config_text("novalue\n")
    with pytest.raises(ContractError, match="unknown config key"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ContractError):
        TrainConfig(lr=0).validate()
    with pytest.raises(ContractError):
        TrainConfig(lambda_c=-1).validate()
    with pytest.raises(ContractError):
        preset("imagenet")


# ------------------------------------------------------------------- model


def test_lambda_linearity_at_init(data):
    vocab = build_vocab(data)
    batch = make_batch(data[:4], vocab)
    outs = {}
    for lam in (0.1, 0.2):
        model = CaptionModel(TINY.replace(lambda_d=lam), vocab, 5, 9)
        with ad.no_grad():
            outs[lam] = model.forward(batch)
    rest = {k: v.total.item() - k * v.l_dirl.item() for k, v in outs.items()}
    assert outs[0.1].l_dirl.item() == outs[0.2].l_dirl.item()
    assert rest[0.1] == pytest.approx(rest[0.2], abs=1e-12)
    contrib = {k: v.total.item() - v.l_cap.item() - TINY.lambda_c * v.l_ccr.item() for k, v in outs.items()}
    assert contrib[0.2] == pytest.approx(2 * contrib[0.1], rel=1e-12)


def test_ccr_needs_two_samples(data):
    vocab = build_vocab(data)
    model = CaptionModel(TINY, vocab, 5, 9)
    with ad.no_grad():
        out = model.forward(make_batch(data[:1], vocab))
    assert out.l_ccr is None


def test_batch_indices_cover_epoch():
    seen = np.concatenate([batch_indices(10, 3, 0, it) for it in range(3)])
    assert len(set(seen.tolist())) == 9
    np.testing.assert_array_equal(batch_indices(10, 3, 0, 4), batch_indices(10, 3, 0, 4))


# ------------------------------------------------------------------- train


def test_training_is_deterministic(data, tmp_path):
    a = train(TINY, data, trace_path=tmp_path / "a.jsonl")
    b = train(TINY, data, trace_path=tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    rec = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"iteration", "L_cap", "L_dirl", "L_ccr", "total", "diag_mean", "offdiag_mean"}
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_dirl_off_logs_zero(data):
    ck = train(TINY.replace(dirl=False), data)
    assert all(r["L_dirl"] == 0.0 for r in ck.trace)
    assert all(0 < r["diag_mean"] <= 1 for r in ck.trace)


def test_resume_matches_uninterrupted_run(data, tmp_path):
    full = train(TINY.replace(max_iters=8), data)
    half = train(TINY.replace(max_iters=3, ckpt_every=3), data, out_dir=tmp_path)
    resumed = train(TINY.replace(max_iters=8), data, resume=load_checkpoint(tmp_path / "latest.ckpt"))
    assert half.trace + resumed.trace == full.trace
    for k in full.params:
        np.testing.assert_array_equal(full.params[k], resumed.params[k])


def test_checkpoint_round_trip_and_errors(data, tmp_path):
    ck = train(TINY.replace(max_iters=2), data)
    path = tmp_path / "c.ckpt"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    assert back.config == ck.config and back.iteration == 2 and back.vocab.itos == ck.vocab.itos
    assert back.adam.t == ck.adam.t
    for k in ck.params:
        np.testing.assert_array_equal(back.params[k], ck.params[k])
        np.testing.assert_array_equal(back.adam.m[k], ck.adam.m[k])
    raw = path.read_bytes()
    assert raw.startswith(CKPT_MAGIC)
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-10])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(bad)


def test_non_finite_loss_aborts_with_last_good(data, tmp_path, monkeypatch):
    import dirlcc.train as train_mod

    calls = {"n": 0}
    real = train_mod.adam_step

    def flaky(params, grads, state, lr):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NumericError("injected")
        return real(params, grads, state, lr)

    monkeypatch.setattr(train_mod, "adam_step", flaky)
    with pytest.raises(TrainingAborted) as err:
        train(TINY, data, out_dir=tmp_path)
    assert err.value.checkpoint.iteration == 2
    assert load_checkpoint(tmp_path / "last_good.ckpt").iteration == 2


def test_single_sample_batches_warn(data, caplog):
    with caplog.at_level("WARNING", logger="dirlcc.train"):
        ck = train(TINY.replace(batch_size=1, max_iters=2), data)
    assert "contrastive" in caplog.text
    assert all(r["L_ccr"] == 0.0 for r in ck.trace)


def test_roll_pair_keeps_relative_alignment(data):
    batch = make_batch(data[:4], build_vocab(data))
    rolled = roll_pair(batch, np.random.default_rng(3))
    np.testing.assert_array_equal(rolled.tokens, batch.tokens)
    for i in range(4):
        # a shared roll: the offset that maps before to rolled before also maps after
        hits = [(r, c) for r in range(3) for c in range(3)
                if np.array_equal(np.roll(batch.before[i], (r, c), axis=(0, 1)), rolled.before[i])]
        assert any(np.array_equal(np.roll(batch.after[i], rc, axis=(0, 1)), rolled.after[i]) for rc in hits)


def test_resume_with_roll_augment(data, tmp_path):
    cfg = TINY.replace(roll_augment=True, max_iters=6)
    full = train(cfg, data)
    train(cfg.replace(max_iters=3, ckpt_every=3), data, out_dir=tmp_path)
    resumed = train(cfg, data, resume=load_checkpoint(tmp_path / "latest.ckpt"))
    assert full.trace[3:] == resumed.trace
    assert full.trace != train(TINY, data).trace
