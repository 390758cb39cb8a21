import json
import subprocess
import sys

import pytest

from rev2net import cli

SMALL_MODEL = {"frames": 4, "height": 16, "width": 16, "encoder_widths": [4, 4, 8, 8],
               "encoder_pools": [[1, 2, 2], [2, 2, 2], [1, 2, 2], [1, 1, 1]],
               "latent_dim": 2, "decoder_width": 4, "frame_width": 4}
SUBCOMMANDS = ("gen-data", "flow", "train", "ablate", "xdomain", "grid", "eval", "gradcheck", "export")


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--n", "2", "--seed", "0", "--out", str(root / "ds")]) == 0
    # generated at the small geometry so the module stays fast
    from rev2net import data as D
    D.gen_dataset(2, 0, root / "ds", frames=4, height=16, width=16)
    assert cli.main(["flow", "--manifest", str(root / "ds" / "manifest.jsonl")]) == 0
    return root


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_help_for_every_subcommand(name, capsys):
    code, out, _ = run([name, "--help"], capsys)
    assert code == 0 and "usage: rev2net" in out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rev2net", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and all(s in res.stdout for s in SUBCOMMANDS)


def test_unknown_subcommand_exits_1(capsys):
    code, _, err = run(["frobnicate"], capsys)
    assert code == 1 and "invalid choice" in err


def test_missing_required_option_exits_1(capsys):
    assert run(["export", "--checkpoint", "x"], capsys)[0] == 1


def test_negative_weight_names_the_field(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", model={"alpha": -1}, train={"manifest": "m.jsonl"})
    code, _, err = run(["train", "--config", cfg], capsys)
    assert code == 1 and "model.alpha" in err


def test_unknown_config_key_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", model={"alpah": 0.1})
    code, _, err = run(["train", "--config", cfg], capsys)
    assert code == 1 and "alpah" in err


def test_missing_config_file_exits_2(tmp_path, capsys):
    code, _, err = run(["train", "--config", tmp_path / "nope.json"], capsys)
    assert code == 2 and "nope.json" in err


def test_corrupt_checkpoint_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.rv2n"
    bad.write_bytes(b"not a checkpoint")
    code, _, err = run(["export", "--checkpoint", bad, "--out", tmp_path / "o.rv2n"], capsys)
    assert code == 2 and "bad.rv2n" in err


def test_gradcheck_passes(capsys):
    code, out, _ = run(["gradcheck"], capsys)
    lines = out.strip().splitlines()
    assert code == 0
    assert lines[-1].startswith(f"{len(lines) - 1}/{len(lines) - 1} within")
    assert any(l.startswith("total_loss") for l in lines)


def test_pipeline_train_eval_export(dataset, tmp_path, capsys):
    manifest = dataset / "ds" / "manifest.jsonl"
    cfg = write_config(tmp_path / "run.json", model=SMALL_MODEL,
                       train={"manifest": str(manifest), "epochs": 1, "batch_size": 8, "out_dir": "out"})
    before = set(p for p in dataset.rglob("*"))
    code, out, _ = run(["train", "--config", cfg], capsys)
    assert code == 0
    res = json.loads(out)
    assert set(res["final_losses"]) >= {"ce", "ddp_high", "ddp_low", "flow", "recon", "total"}
    out_dir = tmp_path / "out"
    assert {p.name for p in out_dir.iterdir()} == {"metrics.jsonl", "checkpoint.rv2n", "checkpoint.rv2n.json",
                                                   "report.json"}
    # the shared flow cache was reused, nothing new written next to the dataset
    assert set(p for p in dataset.rglob("*")) == before

    code, out, _ = run(["eval", "--checkpoint", out_dir / "checkpoint.rv2n", "--manifest", manifest], capsys)
    assert code == 0
    acc = json.loads(out)["accuracy"]
    assert acc == res["test_accuracy"]

    code, out, _ = run(["export", "--checkpoint", out_dir / "checkpoint.rv2n", "--out", tmp_path / "inf.rv2n"],
                       capsys)
    assert code == 0
    info = json.loads(out)
    assert info["inference_params"] < info["params"]
    code, out, _ = run(["eval", "--checkpoint", tmp_path / "inf.rv2n", "--manifest", manifest], capsys)
    assert code == 0 and json.loads(out)["accuracy"] == acc


def test_train_ddp_override(dataset, tmp_path, capsys):
    cfg = write_config(tmp_path / "run.json", model=SMALL_MODEL,
                       train={"manifest": str(dataset / "ds" / "manifest.jsonl"), "epochs": 1, "out_dir": "o"})
    code, out, _ = run(["train", "--config", cfg, "--ddp", "off"], capsys)
    assert code == 0
    losses = json.loads(out)["final_losses"]
    assert losses["ddp_high"] == 0.0 and losses["ddp_low"] == 0.0


def test_train_rerun_reproduces_metrics(dataset, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        cfg = write_config(tmp_path / f"{name}.json", model=SMALL_MODEL,
                           train={"manifest": str(dataset / "ds" / "manifest.jsonl"), "epochs": 1,
                                  "precision": 64, "out_dir": name})
        code, out, _ = run(["train", "--config", cfg], capsys)
        assert code == 0
        outs.append(json.loads(out))
    for k, v in outs[0]["final_losses"].items():
        assert abs(v - outs[1]["final_losses"][k]) <= 1e-6


def test_ablate_writes_reports(dataset, tmp_path, capsys):
    cfg = write_config(tmp_path / "run.json", model=SMALL_MODEL,
                       train={"manifest": str(dataset / "ds" / "manifest.jsonl"), "epochs": 1, "batch_size": 12,
                              "out_dir": "out"})
    code, out, _ = run(["ablate", "--config", cfg], capsys)
    assert code == 0
    assert len(json.loads(out)["rows"]) == 4
    assert (tmp_path / "out" / "ablation.json").exists() and (tmp_path / "out" / "ablation.csv").exists()


def test_xdomain_writes_reports(dataset, tmp_path, capsys):
    cfg = write_config(tmp_path / "run.json", model=SMALL_MODEL,
                       train={"manifest": str(dataset / "ds" / "manifest.jsonl"), "epochs": 1, "batch_size": 12,
                              "out_dir": "out"})
    code, out, _ = run(["xdomain", "--config", cfg], capsys)
    assert code == 0
    assert len(json.loads(out)["rows"]) == 6
    assert len((tmp_path / "out" / "xdomain.csv").read_text().splitlines()) == 7


def test_empty_split_is_invalid(dataset, tmp_path, capsys):
    cfg = write_config(tmp_path / "run.json", model=SMALL_MODEL,
                       train={"manifest": str(dataset / "ds" / "manifest.jsonl"), "epochs": 1,
                              "eval_split": "validation"})
    code, _, err = run(["train", "--config", cfg], capsys)
    assert code == 1 and "validation" in err
