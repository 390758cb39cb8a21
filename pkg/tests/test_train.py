import json
from dataclasses import replace

import numpy as np
import pytest

from rev2net import data as D
from rev2net import model as M
from rev2net import train as TR
from rev2net.errors import DataError, InvalidInputError

SMALL = dict(frames=4, height=16, width=16, encoder_widths=(4, 4, 8, 8),
             encoder_pools=((1, 2, 2), (2, 2, 2), (1, 2, 2), (1, 1, 1)),
             latent_dim=2, decoder_width=4, frame_width=4)
GEOM = dict(frames=4, height=16, width=16)


def small_config(**kw):
    return M.Rev2NetConfig(**{**SMALL, **kw})


def clips(n, domain="A", offset=0):
    return [D.synth_clip(i % 6, domain, offset + i, **GEOM) for i in range(n)]


@pytest.fixture(scope="module")
def data():
    return TR.TrainingData.from_clips(clips(12))


@pytest.fixture(scope="module")
def test_data():
    return TR.TrainingData.from_clips(clips(6, offset=500), flows=False)


def run(data, epochs=2, precision=32, out_dir=None, **model_kw):
    cfg = TR.TrainConfig(epochs=epochs, batch_size=4, seed=7, precision=precision)
    m = M.build(small_config(**model_kw), cfg.seed, dtype=cfg.dtype)
    return m, TR.train(m, cfg, data, out_dir=out_dir)


def test_same_seed_bitwise_identical_at_32_bit(data):
    (m1, r1), (m2, r2) = run(data), run(data)
    assert r1.final_total == r2.final_total
    assert r1.batch_digest == r2.batch_digest
    for (_, a), (_, b) in zip(m1.params.tensors(), m2.params.tensors()):
        assert np.array_equal(a.data, b.data)


def test_same_seed_close_at_64_bit(data):
    (_, r1), (_, r2) = run(data, precision=64), run(data, precision=64)
    assert abs(r1.final_total - r2.final_total) <= 1e-6


def test_batch_orders_cover_every_clip_once():
    orders = TR.batch_orders(13, 4, 0, 1)
    assert sorted(np.concatenate(orders).tolist()) == list(range(13))
    assert [len(o) for o in orders] == [4, 4, 4, 1]
    assert not np.array_equal(np.concatenate(orders), np.concatenate(TR.batch_orders(13, 4, 0, 2)))


def test_ddp_off_reports_zero_penalties(tmp_path, data):
    _, rep = run(data, epochs=1, out_dir=tmp_path, ddp_mode="off")
    rows = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert rows and all(r["ddp_high"] == 0.0 and r["ddp_low"] == 0.0 for r in rows)
    assert all(r["flow"] > 0 and r["recon"] > 0 for r in rows)


@pytest.mark.parametrize("mode,expect", [("low", (True, False)), ("high", (False, True)), ("both", (True, True))])
def test_ddp_mode_selects_terms(tmp_path, data, mode, expect):
    run(data, epochs=1, out_dir=tmp_path, ddp_mode=mode)
    row = json.loads((tmp_path / "metrics.jsonl").read_text().splitlines()[0])
    assert (row["ddp_low"] > 0, row["ddp_high"] > 0) == expect


def test_epoch_means_match_step_log(tmp_path, data):
    _, rep = run(data, epochs=2, out_dir=tmp_path)
    rows = [json.loads(l) for l in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    for rec in rep.epochs:
        mine = [r for r in rows if r["epoch"] == rec.epoch]
        assert len(mine) == rec.steps == 3
        for k, v in rec.losses.items():
            assert v == pytest.approx(np.mean([r[k] for r in mine]), abs=1e-9)
    for r in rows:
        recon = r["ce"] + r["w_ddp_high"] * r["ddp_high"] + r["w_ddp_low"] * r["ddp_low"] \
            + r["w_flow"] * r["flow"] + r["w_recon"] * r["recon"]
        assert abs(recon - r["total"]) <= 1e-6
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["batch_digest"] == rep.batch_digest
    assert (tmp_path / "checkpoint.rv2n").exists() and (tmp_path / "checkpoint.rv2n.json").exists()


def test_missing_flow_target_is_a_data_error():
    cs = clips(3)
    flows = {c.clip_id: np.zeros((3, 2, 16, 16), np.float32) for c in cs[:2]}
    with pytest.raises(DataError, match=cs[2].clip_id):
        TR.TrainingData.from_clips(cs, flows=flows)
    no_flow = TR.TrainingData.from_clips(cs, flows=False)
    m = M.build(small_config())
    with pytest.raises(DataError, match=cs[0].clip_id):
        TR.train(m, TR.TrainConfig(epochs=1), no_flow)
    # without the flow decoder no targets are needed
    TR.train(M.build(small_config(use_flow_decoder=False)), TR.TrainConfig(epochs=1, batch_size=3), no_flow)


def test_empty_split_evaluation_raises():
    with pytest.raises(InvalidInputError):
        TR.evaluate(M.build(small_config()), None)


def test_untrained_model_near_chance():
    d = TR.TrainingData.from_clips(clips(120, offset=2000), flows=False)
    acc = TR.evaluate(M.build(small_config(), seed=11), d)
    assert abs(acc - 1 / 6) <= 0.15


def test_exported_model_same_accuracy(tmp_path, data, test_data):
    m, _ = run(data, epochs=1)
    exported = M.load_checkpoint(M.export_inference(m, tmp_path / "e.rv2n"))
    assert np.array_equal(TR.predict(m, test_data), TR.predict(exported, test_data))
    assert TR.evaluate(exported, test_data) == TR.evaluate(m, test_data)


# -- grid search ----------------------------------------------------------------------

def test_grid_structure_and_tie_break():
    res = TR.grid_search(small_config(), TR.TrainConfig(), evaluator=lambda w: 0.5)
    coarse = [r for r in res.table if r["stage"] == "coarse"]
    fine = [r for r in res.table if r["stage"] == "fine"]
    for name in TR.WEIGHT_NAMES:
        assert [r["value"] for r in coarse if r["weight"] == name] == list(TR.COARSE_GRID)
        assert len([r for r in fine if r["weight"] == name]) == 5
    assert res.best == dict.fromkeys(TR.WEIGHT_NAMES, 0.0)
    assert res.coarse_winners == dict.fromkeys(TR.WEIGHT_NAMES, 0.0)


def test_grid_refines_around_coarse_winner():
    target = {"alpha": 0.1, "beta": 1.0, "lambda_flow": 1e-3, "lambda_im": 10.0}

    def score(w):
        return -sum(abs(np.log10(w[k] + 1e-9) - np.log10(target[k])) for k in TR.WEIGHT_NAMES)

    res = TR.grid_search(small_config(), TR.TrainConfig(), evaluator=score)
    assert res.coarse_winners == target
    fine_alpha = [r for r in res.table if r["stage"] == "fine" and r["weight"] == "alpha"]
    assert [r["value"] for r in fine_alpha] == pytest.approx([0, 0.05, 0.1, 0.15, 0.2])
    assert all(r["beta"] == 1.0 and r["lambda_im"] == 10.0 for r in fine_alpha)
    assert res.best == pytest.approx(target)


def test_fine_grid_for_zero_winner():
    assert TR.fine_grid(0.0) == pytest.approx((0, 2.5e-5, 5e-5, 7.5e-5, 1e-4))


def test_grid_needs_positive_budget():
    with pytest.raises(InvalidInputError):
        TR.grid_search(small_config(), TR.TrainConfig(), epochs_per_cell=0, evaluator=lambda w: 0.0)


def test_grid_default_evaluator_trains(data, test_data, monkeypatch):
    calls = []
    real = TR.train
    monkeypatch.setattr(TR, "train", lambda m, cfg, *a, **k: calls.append((m.config, cfg.epochs)) or real(m, cfg, *a, **k))
    monkeypatch.setattr(TR, "COARSE_GRID", (0.0, 0.1))
    monkeypatch.setattr(TR, "FINE_GRID", (0.0, 1.0))
    res = TR.grid_search(small_config(), TR.TrainConfig(batch_size=6), data, test_data, epochs_per_cell=1)
    assert len(calls) == len(res.table) == 16
    assert all(epochs == 1 for _, epochs in calls)
    assert all(0 <= r["accuracy"] <= 1 for r in res.table)


# -- ablation and cross-domain -----------------------------------------------------------

def test_ablation_rows(tmp_path, data, test_data):
    rep = TR.ablation_suite(small_config(), TR.TrainConfig(epochs=1, batch_size=6), data, test_data, tmp_path)
    assert [r["variant"] for r in rep.rows] == list(TR.ABLATION_VARIANTS)
    assert len({r["batch_digest"] for r in rep.rows}) == 1
    by = {r["variant"]: r for r in rep.rows}
    assert not any(l.startswith("frame-decoder") for l in by["Rev2Net w/o frame dec."]["layers"])
    assert not any(l.startswith("flow-decoder") for l in by["Rev2Net w/o flow dec."]["layers"])
    assert by["Rev2Net w/o DDP"]["params"] == by["Rev2Net (ours)"]["params"]
    assert rep.directional_ok == (by["Rev2Net (ours)"]["accuracy"] >= by["Rev2Net w/o DDP"]["accuracy"])
    jpath, cpath = TR.write_reports(tmp_path, "ablation", rep.to_dict(), rep.rows)
    assert len(cpath.read_text().splitlines()) == 5
    assert json.loads(jpath.read_text())["rows"][0]["variant"] == "Rev2Net w/o frame dec."


def test_ablation_warns_when_full_model_loses(monkeypatch, data, test_data):
    scores = iter([0.5, 0.5, 0.9, 0.1])
    monkeypatch.setattr(TR, "evaluate", lambda m, d: next(scores) if d is test_data else 0.0)
    with pytest.warns(RuntimeWarning):
        rep = TR.ablation_suite(small_config(), TR.TrainConfig(epochs=1, batch_size=12), data, test_data)
    assert not rep.directional_ok


def test_cross_domain_rows(tmp_path):
    manifest = D.gen_dataset(2, 0, tmp_path / "ds", **GEOM)
    rep = TR.cross_domain(manifest, small_config(), TR.TrainConfig(epochs=1, batch_size=6),
                          cache_dir=tmp_path / "flows")
    assert len(rep.rows) == 6
    assert {(r["variant"], r["direction"]) for r in rep.rows} == \
        {(v, d) for v in TR.XDOMAIN_VARIANTS for d in ("A->B", "B->A")}
    assert {r["input"] for r in rep.rows if r["variant"] == "Flow classifier"} == {"Flow"}
    assert all(0 <= r["accuracy"] <= 1 for r in rep.rows)
    assert rep.accuracy("Rev2Net", "B->A") == [r for r in rep.rows if r["variant"] == "Rev2Net"][1]["accuracy"]


def test_cross_domain_needs_two_domains(tmp_path):
    manifest = D.gen_dataset(2, 0, tmp_path / "ds", domains=("A",), **GEOM)
    with pytest.raises(InvalidInputError):
        TR.cross_domain(manifest, small_config(), TR.TrainConfig(epochs=1))


def test_plain_flow_classifier_geometry():
    cfg = TR.plain_classifier(small_config(), "flow")
    assert (cfg.in_channels, cfg.frames, cfg.decoders) == (2, 3, (False, False))
    m = M.build(cfg)
    assert M.forward_infer(m, np.zeros((1, 3, 2, 16, 16), np.float32)).shape == (1, 6)


def test_train_config_validation():
    from rev2net.errors import ConfigError
    for bad in (dict(epochs=0), dict(batch_size=0), dict(lr=-1.0), dict(precision=16), dict(optimizer="sgd")):
        with pytest.raises(ConfigError):
            TR.TrainConfig(**bad)
