import json

import numpy as np
import pytest
import torch

from vsdn import cli
from vsdn.config import ConfigError, RunConfig, parse_schedule, read_config_file
from vsdn.glyphforge import write_dataset
from vsdn.lexnoise import load_similarity
from vsdn.netcore import VSDN, save_checkpoint, tiny_config
from vsdn.trainkit import save_model

TINY = [a for kv in ("height=8", "width=16", "t_max=4", "feat_dim=8", "sem_dim=8", "vis_dim=8",
                     "emb_dim=6", "step_dim=4", "attn_dim=6", "conv_channels=3,4",
                     "pool_layers=1", "batch_size=8") for a in ("--set", kv)]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr().out.strip().splitlines()
    return code, (json.loads(out[-1]) if code == 0 and out else None)


def test_precedence_defaults_file_cli(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("# comment\nlr = 0.5\nseed = 3  # trailing\n")
    assert RunConfig.resolve()["lr"] == RunConfig()["lr"]
    assert RunConfig.resolve(f)["lr"] == 0.5
    cfg = RunConfig.resolve(f, {"lr": "0.25"})
    assert cfg["lr"] == 0.25 and cfg["seed"] == 3
    assert RunConfig.resolve(f, {"seed": None})["seed"] == 3


def test_unknown_and_bad_keys():
    with pytest.raises(ConfigError):
        RunConfig({"no_such_key": 1})
    with pytest.raises(ConfigError):
        RunConfig({"lr": "fast"})
    assert RunConfig({"samples-per-word": "7"})["samples_per_word"] == 7


def test_bad_config_file_line(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("lr 0.1\n")
    with pytest.raises(ConfigError):
        read_config_file(f)


def test_schedule_and_topk_parsing():
    assert parse_schedule("") is None
    assert parse_schedule("3:0.1, 6:0.01") == {3: 0.1, 6: 0.01}
    assert RunConfig({"topk": "1,10"}).topk() == (1, 10)
    with pytest.raises(ConfigError):
        RunConfig({"topk": "0"}).topk()


def test_digest_tracks_values():
    assert RunConfig().digest() == RunConfig().digest()
    assert RunConfig({"seed": 1}).digest() != RunConfig().digest()


def test_cli_unknown_key_exit_2(capsys, tmp_path):
    code, _ = run(capsys, "build-sim", "--from-glyphs", "--set", "bogus=1",
                  "--out", str(tmp_path / "s.txt"))
    assert code == 2


def test_cli_missing_required_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen-data"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["build-sim"])
    assert exc.value.code == 2


def test_gen_data_is_deterministic(capsys, tmp_path):
    words = tmp_path / "w.txt"
    words.write_text("ab\nba\nc1\nq7\nzz\nhi\n")
    digests, echoes = [], []
    for name in ("a", "b"):
        code, out = run(capsys, "gen-data", "--words", str(words), "--samples-per-word", "2",
                        "--fraction", "0.5", "--test-invoc", "1", "--test-outvoc", "2",
                        "--out", str(tmp_path / name), *TINY)
        assert code == 0
        digests.append(out["digest"])
        echoes.append((tmp_path / name / "config.txt").read_text())
        assert out["vocab_size"] == 3 and out["images"] == {"train": 6, "test": 6}
    assert digests[0] == digests[1] and echoes[0] == echoes[1]
    assert "samples_per_word = 2" in echoes[0]


def test_build_sim_default_k(capsys, tmp_path):
    code, out = run(capsys, "build-sim", "--from-glyphs", "--out", str(tmp_path / "s.txt"))
    assert code == 0 and out["k"] == 3.0 and out["max_row_error"] < 1e-9
    sim = load_similarity(tmp_path / "s.txt")
    assert sim.S.shape == (36, 36) and np.allclose(sim.S.sum(axis=1), 1)


def test_build_sim_from_checkpoint(capsys, tmp_path):
    torch.manual_seed(0)
    save_model(tmp_path / "m.ckpt", VSDN(tiny_config()))
    code, out = run(capsys, "build-sim", "--from-checkpoint", str(tmp_path / "m.ckpt"),
                    "--k", "2", "--out", str(tmp_path / "s.txt"))
    assert code == 0 and out["k"] == 2.0
    # a checkpoint without the CTC group is a runtime error
    save_checkpoint(tmp_path / "bad.ckpt", {"x": np.zeros(3)}, {})
    code, _ = run(capsys, "build-sim", "--from-checkpoint", str(tmp_path / "bad.ckpt"),
                  "--out", str(tmp_path / "s2.txt"))
    assert code == 1


def test_train_eval_export_roundtrip(capsys, tmp_path, small_dataset):
    data = tmp_path / "data"
    write_dataset(small_dataset, data)
    code, out = run(capsys, "train", "--data", str(data), "--epochs", "1",
                    "--out", str(tmp_path / "run"), *TINY)
    assert code == 0
    assert "epochs = 1" in (tmp_path / "run" / "config.txt").read_text()
    ckpt = out["best_checkpoint"]
    code, out = run(capsys, "eval", "--checkpoint", ckpt, "--data", str(data),
                    "--out", str(tmp_path / "ev"))
    assert code == 0 and set(out["counts"]) == {"total"}
    code, out = run(capsys, "eval", "--checkpoint", ckpt, "--data", str(data),
                    "--train-vocab", "manifest", "--out", str(tmp_path / "ev2"))
    assert code == 0 and out["counts"] == {"invoc": 2, "outvoc": 2, "total": 4}
    assert (tmp_path / "ev2" / "report.tsv").exists()
    code, out = run(capsys, "export-attention", "--checkpoint", ckpt, "--data", str(data),
                    "--index", "1", "--out", str(tmp_path / "att"))
    assert code == 0 and len(out["strips"]) >= 1
    code, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "missing.ckpt"),
                  "--data", str(data))
    assert code == 1


def test_ablate_query_mode(capsys, tmp_path, small_dataset):
    data = tmp_path / "data"
    write_dataset(small_dataset, data)
    code, out = run(capsys, "ablate", "--data", str(data), "--suite", "query_mode",
                    "--epochs", "1", "--out", str(tmp_path / "ab"), *TINY)
    assert code == 0
    assert set(out["rows"]) == {"query_prev_visual", "query_semantic"}
    assert (tmp_path / "ab" / "ablation_query_mode.tsv").exists()
    code, _ = run(capsys, "ablate", "--data", str(data), "--suite", "vocab_reliance",
                  "--epochs", "1", "--out", str(tmp_path / "ab2"), *TINY)
    assert code != 0
