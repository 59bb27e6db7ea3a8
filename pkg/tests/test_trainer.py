import json
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from temporal_ssl import warp_sampler as ws
from temporal_ssl.dataio import PreprocessConfig
from temporal_ssl.model import NetworkConfig, build_model, load_checkpoint, parameter_digest
from temporal_ssl.trainer import (OptimizerConfig, PretrainConfig, ProbeConfig, build_batch, cosine_lr,
                                  joint_loss, plan_video, pretrain, probe_train, split_holdout)

PRE = PreprocessConfig(resize_h=32, resize_w=32, crop=24)
NET = NetworkConfig(channels=(4, 8, 8, 8, 8), fc_width=16, input_size=24)


def hand_ce(logits, label):
    top = max(logits)
    z = [v - top for v in logits]
    return math.log(sum(math.exp(v) for v in z)) - z[label]


def test_loss_identities():
    n = 28
    labels = torch.arange(n) % 4
    mask = labels == 0
    speeds = torch.where(mask, torch.arange(n) % 4, torch.zeros(n, dtype=torch.long))
    t = joint_loss(torch.zeros(n, 4), torch.zeros(n, 4), labels, speeds, mask)
    assert abs(t.motion.item() - math.log(4)) < 1e-6
    assert abs(t.speed.item() - math.log(4)) < 1e-6
    big = 1e4
    t = joint_loss(F.one_hot(labels, 4).float() * big, F.one_hot(speeds, 4).float() * big, labels, speeds, mask)
    assert t.motion.item() < 1e-6 and t.speed.item() < 1e-6 and t.total.item() < 1e-6


def test_loss_matches_hand_computation():
    g = torch.Generator().manual_seed(0)
    m = torch.randn(8, 4, generator=g, dtype=torch.float64)
    s = torch.randn(8, 4, generator=g, dtype=torch.float64)
    ml = torch.tensor([0, 1, 2, 3, 0, 1, 2, 3])
    mask = ml == 0
    sl = torch.tensor([2, 0, 0, 0, 3, 0, 0, 0])
    t = joint_loss(m, s, ml, sl, mask)
    motion = np.mean([hand_ce(m[i].tolist(), int(ml[i])) for i in range(8)])
    speed = np.mean([hand_ce(s[i].tolist(), int(sl[i])) for i in (0, 4)])
    assert t.motion.item() == pytest.approx(motion, abs=1e-12)
    assert t.speed.item() == pytest.approx(speed, abs=1e-12)
    assert t.total.item() == pytest.approx(motion + speed, abs=1e-12)


def test_speed_term_ignores_non_speed_clips():
    ml = torch.tensor([0, 1, 2, 3])
    mask = ml == 0
    sl = torch.tensor([1, 0, 0, 0])
    s = torch.zeros(4, 4)
    s[0, 1] = 50.0
    s[1:] = torch.randn(3, 4) * 100  # garbage on masked rows must not matter
    assert joint_loss(torch.zeros(4, 4), s, ml, sl, mask).speed.item() < 1e-6
    empty = joint_loss(torch.zeros(4, 4), s, ml, sl, torch.zeros(4, dtype=torch.bool))
    assert empty.speed.item() == 0.0


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 100, 3e-4) == pytest.approx(3e-4)
    assert cosine_lr(99, 100, 3e-4) == pytest.approx(3e-7)
    assert cosine_lr(49.5, 100, 3e-4) == pytest.approx((3e-4 + 3e-7) / 2)
    lrs = [cosine_lr(i, 50, 1.0) for i in range(50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_optimizer_defaults():
    opt = OptimizerConfig().make([torch.nn.Parameter(torch.zeros(2))], 3e-4)
    g = opt.param_groups[0]
    assert isinstance(opt, torch.optim.AdamW)
    assert g["betas"] == (0.9, 0.99) and g["weight_decay"] == 1e-4
    assert OptimizerConfig().lr_transfer == 5e-5
    with pytest.raises(ValueError):
        OptimizerConfig(method="sgd")


def test_zero_lr_and_decay_leave_weights_unchanged():
    model = build_model(NET)
    before = parameter_digest(model.parameters())
    opt = OptimizerConfig(weight_decay=0.0).make(model.parameters(), 0.0)
    x = torch.randn(4, 3, 16, 24, 24)
    out = model.train()(x)
    joint_loss(out.motion_logits, out.speed_logits, torch.arange(4), torch.tensor([1, 0, 0, 0]),
               torch.tensor([True, False, False, False])).total.backward()
    opt.step()
    assert parameter_digest(model.parameters()) == before


def test_plan_video_covers_all_transformations():
    rng = np.random.default_rng(0)
    kappas = set()
    for _ in range(200):
        seqs = plan_video(128, rng)
        assert [int(s.spec.tau) for s in seqs] == [0, 1, 2, 3]
        assert all(ws.validate(s, 128).ok for s in seqs)
        kappas.add(seqs[0].spec.kappa)
    assert kappas == {0, 1, 2, 3}
    # capped by the video length
    assert {plan_video(40, rng)[0].spec.kappa for _ in range(50)} == {0, 1}


def test_batch_is_balanced(tiny_corpus):
    _, train, _ = tiny_corpus
    batch = build_batch(train[:7], np.random.default_rng(0), PRE)
    assert len(batch) == 28
    assert np.bincount(batch.motion_labels).tolist() == [7, 7, 7, 7]
    assert batch.speed_mask.sum() == 7 and (batch.motion_labels[batch.speed_mask] == 0).all()
    x, m, s, mask = batch.tensors(PRE)
    assert x.shape == (28, 3, 16, 24, 24)


def test_holdout_split_is_disjoint():
    recs = list(range(50))
    train, hold = split_holdout(recs, 0.1, seed=0)
    assert len(hold) == 5 and set(train).isdisjoint(hold) and len(train) + len(hold) == 50


def test_zero_epochs_writes_a_loadable_checkpoint(tiny_corpus, tmp_path):
    _, train, _ = tiny_corpus
    res = pretrain(train, NET, pre_cfg=PRE, train_cfg=PretrainConfig(epochs=0), out_dir=tmp_path)
    model, doc = load_checkpoint(res.checkpoint)
    assert doc["step"] == 0 and doc["preprocess"]["crop"] == 24
    assert parameter_digest(model.parameters()) == parameter_digest(build_model(NET).parameters())
    assert (tmp_path / "metrics.jsonl").read_text() == ""


def test_one_epoch_logs_and_is_reproducible(tiny_corpus, tmp_path):
    _, train, _ = tiny_corpus
    cfg = PretrainConfig(epochs=1, videos_per_batch=4, eval_repeats=1)
    pretrain(train, NET, pre_cfg=PRE, train_cfg=cfg, out_dir=tmp_path / "a")
    pretrain(train, NET, pre_cfg=PRE, train_cfg=cfg, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    rows = [json.loads(line) for line in a.decode().splitlines()]
    steps = [r for r in rows if "step" in r]
    assert len(steps) == 3  # 11 training videos / 4 per batch
    assert set(steps[0]) == {"step", "loss_total", "loss_motion", "loss_speed", "lr"}
    assert rows[-1]["epoch"] == 0 and 0 <= rows[-1]["acc_motion"] <= 1


def test_crop_must_match_network(tiny_corpus):
    _, train, _ = tiny_corpus
    with pytest.raises(ValueError):
        pretrain(train, NET, pre_cfg=PreprocessConfig(resize_h=32, resize_w=32, crop=28),
                 train_cfg=PretrainConfig(epochs=0))


def test_frozen_probe_leaves_conv_weights_alone(tiny_corpus):
    _, train, test = tiny_corpus
    model = build_model(NET)
    cfg = ProbeConfig(epochs=2, hidden=16, features_per_video=1, test_crops=2)
    res = probe_train(model, train, test, 4, freeze="conv", pre_cfg=PRE, cfg=cfg)
    assert res.conv_digest_before == res.conv_digest_after
    assert 0 <= res.accuracy <= 1 and len(res.predictions) == len(test)
    tuned = probe_train(model, train, test, 4, freeze="none", pre_cfg=PRE, cfg=cfg)
    assert tuned.conv_digest_before != tuned.conv_digest_after
    # fine-tuning works on a copy
    assert parameter_digest(model.conv_parameters()) == res.conv_digest_before


def test_probe_rejects_bad_labels(tiny_corpus):
    _, train, test = tiny_corpus
    with pytest.raises(ValueError):
        probe_train(build_model(NET), train, test, 3, pre_cfg=PRE)
