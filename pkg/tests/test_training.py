import csv

import numpy as np
import pytest
import torch

from pokefusion.checkpoint import CheckpointError, file_digest, load_tensors, save_tensors
from pokefusion.training import (Batch, Checkpoint, ParamPartition, TrainConfig, Trainer, TrainingError,
                                 adapt_from_backbone, build_model, checkpoint_from, condition_dropout,
                                 domain_mean_features, fit, frozen_digest, make_batch, style_features)

from conftest import small_config


def test_partition_scopes(small_ds):
    m = build_model(small_config(), 0)
    names = {n for n, _ in m.named_parameters()}
    p = ParamPartition.from_model(m, "attention+style")
    assert p.trainable | p.frozen == names and not p.trainable & p.frozen
    assert "null_style" in p.trainable and "style_proj.weight" in p.trainable
    assert all(n.startswith("decoder.") and ".attn." in n for n in p.trainable - set(m.style_names()))
    # encoder attention and the decoder feed-forward stay frozen
    assert not any(n.startswith("enc_attn") or ".ffn." in n for n in p.trainable)
    assert ParamPartition.from_model(m, "style").trainable == set(m.style_names())
    assert ParamPartition.from_model(m, "none").trainable == set()
    with pytest.raises(ValueError):
        ParamPartition(set(), set()).validate(m)


def test_freeze_contract_small(small_ds):
    m = build_model(small_config(), 0)
    tr = Trainer(m, TrainConfig(steps=10, lr=1e-3, batch_size=4))
    before_frozen = frozen_digest(m, tr.partition)
    before = {n: p.detach().clone() for n, p in m.named_parameters()}
    for _ in range(10):
        tr.train_step(tr.sample_batch(small_ds))
    assert frozen_digest(m, tr.partition) == before_frozen
    for n, p in m.named_parameters():
        if n in tr.partition.trainable:
            assert not torch.equal(p, before[n]), n


def test_condition_dropout_rates_and_independence():
    n = 40000
    batch = Batch(torch.zeros(n, 1), torch.full((n, 4), 5), torch.zeros(n, 2), torch.zeros(n, dtype=torch.long),
                  torch.arange(n))
    out = condition_dropout(batch, 0.1, 0.1, np.random.default_rng(0))
    td, sd = out.text_drop.numpy(), out.style_drop.numpy()
    se = np.sqrt(0.1 * 0.9 / n)
    assert abs(td.mean() - 0.1) < 4 * se and abs(sd.mean() - 0.1) < 4 * se
    assert abs((td & sd).mean() - 0.01) < 4 * np.sqrt(0.01 * 0.99 / n)
    # dropped text is all-null, kept text untouched
    assert (out.tokens[td] == 0).all() and (out.tokens[~td] == 5).all()
    none = condition_dropout(batch, 0.0, 0.0, np.random.default_rng(0))
    assert not none.text_drop.any() and not none.style_drop.any()


def test_ema_follows_closed_form():
    m = build_model(small_config(), 0)
    tr = Trainer(m, TrainConfig(ema_decay=0.9))
    x0, c = torch.zeros(16), torch.ones(16)
    tr._update_ema(x0[None], torch.tensor([0]))
    for _ in range(30):
        tr._update_ema(c[None], torch.tensor([0]))
    torch.testing.assert_close(tr.style_ema[0], c + 0.9 ** 30 * (x0 - c))
    assert len(tr.ema_deltas) == 30
    assert tr.ema_deltas[-1] < tr.ema_deltas[0]


def test_style_sources(small_ds):
    means = domain_mean_features(small_ds)
    idx = np.arange(10)
    dm = style_features(small_ds, idx, "domain_mean")
    for row, sid in zip(dm, small_ds.style_ids[idx]):
        np.testing.assert_array_equal(row, means[int(sid)])
    ref = style_features(small_ds, idx, "reference", np.random.default_rng(0))
    for row, sid in zip(ref, small_ds.style_ids[idx]):
        hits = np.flatnonzero((small_ds.features == row).all(axis=1))
        assert len(hits) and (small_ds.style_ids[hits] == sid).all()
    np.testing.assert_array_equal(style_features(small_ds, idx, "self"), small_ds.features[idx])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1e-3, "learning_rate": 1})
    with pytest.raises(ValueError):
        TrainConfig(p_drop_text=1.5)
    with pytest.raises(ValueError):
        TrainConfig(trainable="everything")
    with pytest.raises(ValueError):
        TrainConfig(style_source="random")


def test_non_finite_loss_names_samples(small_ds):
    m = build_model(small_config(), 0)
    tr = Trainer(m, TrainConfig(batch_size=2))
    batch = make_batch(small_ds, [3, 4])
    batch.latents[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingError, match=r"\[3, 4\]"):
        tr.train_step(batch)


def test_fit_writes_loss_csv_and_is_deterministic(small_ds, tmp_path):
    cfg = TrainConfig(steps=5, batch_size=4, seed=7)
    a = fit(small_ds, cfg, model_config=small_config(), out_dir=tmp_path / "a")
    fit(small_ds, cfg, model_config=small_config(), out_dir=tmp_path / "b")
    assert file_digest(tmp_path / "a/checkpoint.pkf") == file_digest(tmp_path / "b/checkpoint.pkf")
    rows = list(csv.reader(open(tmp_path / "a/loss.csv")))
    assert rows[0] == ["step", "loss", "lr"] and len(rows) == 6
    assert [float(r[1]) for r in rows[1:]] == a.losses


def test_checkpoint_round_trip_bit_exact(small_ds, tmp_path):
    m = build_model(small_config(), 0)
    tr = Trainer(m, TrainConfig(batch_size=4))
    for _ in range(3):
        tr.train_step(tr.sample_batch(small_ds))
    ck = checkpoint_from(tr, small_ds, {"note": "x"})
    ck.save(tmp_path / "c.pkf")
    back = Checkpoint.load(tmp_path / "c.pkf")
    assert back.model_config == ck.model_config and back.train_config == ck.train_config
    assert back.step == 3 and back.meta == {"note": "x"} and sorted(back.trainable) == sorted(ck.trainable)
    for k, v in ck.state.items():
        assert torch.equal(back.state[k], v) and back.state[k].dtype == v.dtype
    assert torch.equal(back.inference_style, ck.inference_style)
    for pid, st in ck.optimizer_state["state"].items():
        for key, val in st.items():
            assert torch.equal(back.optimizer_state["state"][pid][key], val)
    back.save(tmp_path / "d.pkf")
    assert (tmp_path / "c.pkf").read_bytes() == (tmp_path / "d.pkf").read_bytes()
    # the rebuilt optimizer accepts the stored state
    opt = torch.optim.AdamW([p for n, p in back.build_model().named_parameters() if n in back.trainable])
    opt.load_state_dict(back.optimizer_state)


def test_checkpoint_format_errors(tmp_path):
    p = tmp_path / "x.pkf"
    save_tensors(p, {"a": torch.arange(3)}, {"k": 1})
    tensors, meta = load_tensors(p)
    assert meta == {"k": 1} and torch.equal(tensors["a"], torch.arange(3))
    data = bytearray(p.read_bytes())
    bad = tmp_path / "bad.pkf"
    bad.write_bytes(b"NOTMAGIC" + bytes(data[8:]))
    with pytest.raises(CheckpointError):
        load_tensors(bad)
    data[8] = 9  # format version
    bad.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_tensors(bad)


def test_adapt_from_backbone(small_ds):
    backbone = build_model(small_config(style_mode="none"), 0).state_dict()
    m = adapt_from_backbone(backbone, small_config(), 1)
    for k, v in backbone.items():
        assert torch.equal(m.state_dict()[k], v)
    for blk in m.decoder:
        assert torch.equal(blk.attn.wk_style, blk.attn.wk_text)
    with pytest.raises(ValueError):
        adapt_from_backbone(backbone, small_config(d=32), 1)


def test_heldout_loss_is_repeatable(small_ds):
    m = build_model(small_config(), 0)
    tr = Trainer(m, TrainConfig())
    assert tr.heldout_loss(small_ds) == tr.heldout_loss(small_ds)
