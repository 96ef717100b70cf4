import csv
import io

import numpy as np
import pytest

from tempstab import harness
from tempstab.cli import main
from tempstab.metrics import TemporalFilter, evaluate_sequences
from tempstab.nn import load_checkpoint
from tempstab.procgen import load_sequences

TINY = """
train_count = 16
patch_size = 16
test_size = 16
test_sequences = 2
test_frames = 12
frame_rate = 10
encoder_widths = 3
batch_size = 8
pretrain_epochs = 1
finetune_epochs = 1
reg_kinds = transform-invariance
alphas = 0.5
repetitions = 1
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().out


def test_full_pipeline(tmp_path, cfg_file, capsys):
    out = tmp_path / "out"
    code, text = run(capsys, "gen-data", "--config", cfg_file, "--output-dir", out)
    assert code == 0 and (out / "test" / "manifest.txt").exists()
    assert len((out / "train" / "manifest.txt").read_text().splitlines()) == 16 + 2

    code, text = run(capsys, "pretrain", "--config", cfg_file, "--output-dir", out, "--seed", 3)
    ckpt = out / "checkpoints" / "pretrain_seed3.ckpt"
    assert code == 0 and ckpt.exists() and "status ok" in text

    code, text = run(capsys, "finetune", "--config", cfg_file, "--output-dir", out, "--seed", 3,
                     "--checkpoint", ckpt, "--reg-kind", "sparse-jacobian", "--alpha", 0.8,
                     "--max-steps", 1)
    assert code == 0 and "steps 1 " in text
    assert (out / "checkpoints" / "sparse-jacobian_a0.800000_seed3.ckpt").exists()

    code, text = run(capsys, "eval", "--config", cfg_file, "--checkpoint", ckpt,
                     "--data", out / "test", "--dump", out / "pred", "--condition", "base")
    (row,) = list(csv.reader(io.StringIO(text)))
    assert row[0] == "base" and len(row) == 4 and int(row[3]) > 0

    code, text = run(capsys, "metrics", "--config", cfg_file, "--ref", out / "test",
                     "--rec", out / "pred", "--condition", "base")
    (row2,) = list(csv.reader(io.StringIO(text)))
    assert row2[0] == "base" and row2[3] == row[3]
    # the prediction dump is clamped to [0, y_max] and quantized to 16 bits
    seqs = load_sequences(out / "test")
    preds = harness.predict_sequences(load_checkpoint(ckpt), seqs)
    refs, masks = zip(*[seqs.stacked(k)[1:] for k in range(len(preds))])
    want = evaluate_sequences(refs, [np.clip(p, 0, 4.0) for p in preds], masks,
                              filt=TemporalFilter(frame_rate=seqs.frame_rate))
    assert float(row2[1]) == pytest.approx(want.psnr, abs=1e-3)
    assert float(row2[2]) == pytest.approx(want.smoothness, rel=1e-3)


def test_metrics_self_comparison(tmp_path, cfg_file, capsys):
    out = tmp_path / "d"
    run(capsys, "gen-data", "--config", cfg_file, "--output-dir", out)
    code, text = run(capsys, "metrics", "--ref", out / "test", "--rec", out / "test")
    assert code == 0
    cond, p, s, n = text.strip().split(",")
    assert p == "inf" and float(s) == 1.0


def test_sweep(tmp_path, cfg_file, capsys):
    out = tmp_path / "s"
    code, text = run(capsys, "sweep", "--config", cfg_file, "--output-dir", out, "--gnuplot")
    assert code == 0
    rows = harness.read_records(out / "results.csv")
    assert [r["reg_kind"] for r in rows] == ["baseline", "none", "transform-invariance"]
    assert (out / "summary.dat").exists()
    assert harness.load_config(out / "config.txt").output_dir == str(out)


def test_bad_usage(capsys):
    with pytest.raises(SystemExit):
        main(["train"])
    with pytest.raises(SystemExit):
        main(["finetune"])  # --checkpoint is required
