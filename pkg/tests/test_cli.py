import numpy as np
import pytest

from patchseg import data_io as IO
from patchseg.cli import main


MICRO_TRAIN_CFG = """\
variant = custom
depth = 1
token_size = 16
heads = 2
patch_size = 8
crop_size = 16
n_classes = 3
decoder = linear
stochastic_depth = 0.0
base_lr = 1e-3
iterations = 3
batch_size = 2
seed = 5
"""

GEN_SPEC = """\
n_images = 4
height = 16
width = 16
n_classes = 3
shapes = rectangle,disk
min_size = 4
max_size = 8
noise_std = 4.0
seed = 3
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "spec.txt").write_text(GEN_SPEC)
    (tmp_path / "cfg.txt").write_text(MICRO_TRAIN_CFG)
    return tmp_path


def run(argv):
    return main([str(a) for a in argv])


def test_gen_data_writes_dataset(workspace, capsys):
    out = workspace / "data"
    assert run(["gen-data", "--spec", workspace / "spec.txt", "--out", out]) == 0
    stdout = capsys.readouterr().out
    assert "resolved config" in stdout
    manifest = IO.load_manifest(out / "manifest.txt")
    assert len(manifest.pairs) == 4


def test_gen_data_same_spec_identical_bytes(workspace):
    out1, out2 = workspace / "d1", workspace / "d2"
    assert run(["gen-data", "--spec", workspace / "spec.txt", "--out", out1]) == 0
    assert run(["gen-data", "--spec", workspace / "spec.txt", "--out", out2]) == 0
    for rel in ["manifest.txt", "images/img_00000.ppm", "labels/lab_00003.pgm"]:
        assert (out1 / rel).read_bytes() == (out2 / rel).read_bytes()


def test_gen_data_bad_spec_returns_1(workspace, capsys):
    bad = workspace / "bad_spec.txt"
    bad.write_text(GEN_SPEC.replace("n_classes = 3", "n_classes = 30"))
    assert run(["gen-data", "--spec", bad, "--out", workspace / "d"]) == 1
    assert "color table" in capsys.readouterr().err


def test_train_eval_infer_roundtrip(workspace, capsys):
    data = workspace / "data"
    ckpt = workspace / "model.ckpt"
    assert run(["gen-data", "--spec", workspace / "spec.txt", "--out", data]) == 0
    assert run(["train", "--config", workspace / "cfg.txt", "--data", data / "manifest.txt",
                "--out", ckpt, "--log", workspace / "train.log"]) == 0
    log_text = (workspace / "train.log").read_text()
    assert log_text.startswith("iter=1 lr=")
    assert len(log_text.strip().splitlines()) == 3

    assert run(["eval", "--ckpt", ckpt, "--data", data / "manifest.txt", "--size-bands"]) == 0
    out = capsys.readouterr().out
    assert "miou = " in out and "miou[small]" in out

    pgm = workspace / "pred.pgm"
    assert run(["infer", "--ckpt", ckpt, "--image", data / "images" / "img_00000.ppm",
                "--out", pgm]) == 0
    pred = IO.read_labels_pgm(pgm)
    assert pred.shape == (16, 16)


def test_train_resume_continues_counter(workspace, capsys):
    data = workspace / "data"
    run(["gen-data", "--spec", workspace / "spec.txt", "--out", data])
    ckpt1 = workspace / "m1.ckpt"
    cfg_short = workspace / "cfg_short.txt"
    cfg_short.write_text(MICRO_TRAIN_CFG.replace("iterations = 3", "iterations = 2"))
    assert run(["train", "--config", cfg_short, "--data", data / "manifest.txt", "--out", ckpt1]) == 0
    _, trained, _ = IO.read_checkpoint_raw(ckpt1)
    assert trained == 2
    # resuming with a 3-iteration horizon runs exactly the third iteration
    ckpt2 = workspace / "m2.ckpt"
    cfg3 = workspace / "cfg3.txt"
    cfg3.write_text(MICRO_TRAIN_CFG)
    capsys.readouterr()
    assert run(["train", "--config", cfg3, "--data", data / "manifest.txt",
                "--out", ckpt2, "--resume", ckpt1]) == 0
    out = capsys.readouterr().out
    assert "resuming" in out and "iter=3 " in out and "iter=2 " not in out
    _, trained2, _ = IO.read_checkpoint_raw(ckpt2)
    assert trained2 == 3


def test_eval_class_count_mismatch_is_validation_error(workspace, capsys):
    data = workspace / "data"
    run(["gen-data", "--spec", workspace / "spec.txt", "--out", data])
    ckpt = workspace / "m.ckpt"
    run(["train", "--config", workspace / "cfg.txt", "--data", data / "manifest.txt", "--out", ckpt])
    other_spec = workspace / "spec4.txt"
    other_spec.write_text(GEN_SPEC.replace("n_classes = 3", "n_classes = 4"))
    data4 = workspace / "data4"
    run(["gen-data", "--spec", other_spec, "--out", data4])
    assert run(["eval", "--ckpt", ckpt, "--data", data4 / "manifest.txt"]) == 1
    assert "n_classes" in capsys.readouterr().err


def test_analyze_attention_and_classemb(workspace, capsys):
    data = workspace / "data"
    run(["gen-data", "--spec", workspace / "spec.txt", "--out", data])
    cfg_mask = workspace / "cfg_mask.txt"
    cfg_mask.write_text(MICRO_TRAIN_CFG.replace("decoder = linear", "decoder = mask"))
    ckpt = workspace / "m.ckpt"
    run(["train", "--config", cfg_mask, "--data", data / "manifest.txt", "--out", ckpt])
    capsys.readouterr()

    table = workspace / "attn.tsv"
    assert run(["analyze", "--ckpt", ckpt, "attention", "--data", data / "manifest.txt",
                "--out", table]) == 0
    lines = table.read_text().strip().splitlines()
    assert lines[0] == "layer\thead\tmean_distance_px"
    assert len(lines) == 1 + 1 * 2  # depth * heads rows

    capsys.readouterr()
    assert run(["analyze", "--ckpt", ckpt, "classemb"]) == 0
    out = capsys.readouterr().out
    assert "class\tx\ty" in out
    assert len([l for l in out.splitlines() if "\t" in l and not l.startswith("class")]) == 3


def test_analyze_classemb_linear_decoder_fails_cleanly(workspace, capsys):
    data = workspace / "data"
    run(["gen-data", "--spec", workspace / "spec.txt", "--out", data])
    ckpt = workspace / "m.ckpt"
    run(["train", "--config", workspace / "cfg.txt", "--data", data / "manifest.txt", "--out", ckpt])
    assert run(["analyze", "--ckpt", ckpt, "classemb"]) == 2
    assert "mask decoder" in capsys.readouterr().err


def test_bench_reports_both_modes(workspace, capsys):
    data = workspace / "data"
    run(["gen-data", "--spec", workspace / "spec.txt", "--out", data])
    ckpt = workspace / "m.ckpt"
    run(["train", "--config", workspace / "cfg.txt", "--data", data / "manifest.txt", "--out", ckpt])
    capsys.readouterr()
    assert run(["bench", "--ckpt", ckpt, "--repeat", 3]) == 0
    out = capsys.readouterr().out
    assert "images_per_sec_reference = " in out
    assert "images_per_sec_parallel = " in out


def test_checkpoint_inspect_lists_exact_parameter_names(workspace, capsys):
    data = workspace / "data"
    run(["gen-data", "--spec", workspace / "spec.txt", "--out", data])
    ckpt = workspace / "m.ckpt"
    run(["train", "--config", workspace / "cfg.txt", "--data", data / "manifest.txt", "--out", ckpt])
    capsys.readouterr()
    assert run(["checkpoint-inspect", "--ckpt", ckpt]) == 0
    out = capsys.readouterr().out
    model, _ = IO.load_checkpoint(ckpt)
    expected = [name for name, _ in model.named_parameters()]
    listed = [line.strip().split()[0] for line in out.splitlines()
              if line.startswith("  ") and "(" in line]
    assert listed == expected
    assert f"total parameters: {model.parameter_count()}" in out


def test_unknown_flag_is_validation_error(workspace, capsys):
    with pytest.raises(SystemExit) as err:
        run(["gen-data", "--spec", workspace / "spec.txt", "--out", workspace / "d", "--bogus"])
    assert err.value.code == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point here
def test_train_nan_abort_exit_code_and_diagnostic(workspace, capsys):
    data = workspace / "data"
    run(["gen-data", "--spec", workspace / "spec.txt", "--out", data])
    diverging = workspace / "cfg_diverge.txt"
    diverging.write_text(MICRO_TRAIN_CFG.replace("base_lr = 1e-3", "base_lr = 1e14")
                         .replace("iterations = 3", "iterations = 20"))
    code = run(["train", "--config", diverging, "--data", data / "manifest.txt",
                "--out", workspace / "m.ckpt", "--log", workspace / "diverge.log"])
    assert code == 2
    err = capsys.readouterr().err
    assert "snapshot" in err
    snapshots = list(workspace.glob("diverged_iter*.ckpt"))
    assert snapshots, "diagnostic snapshot not written"
    IO.load_checkpoint(snapshots[0])  # snapshot must itself be loadable


def test_train_same_inputs_same_seed_identical_checkpoint_bytes(workspace):
    data = workspace / "data"
    run(["gen-data", "--spec", workspace / "spec.txt", "--out", data])
    ckpts = []
    for name in ("r1.ckpt", "r2.ckpt"):
        out = workspace / name
        assert run(["train", "--config", workspace / "cfg.txt", "--data", data / "manifest.txt",
                    "--out", out, "--seed", 11]) == 0
        ckpts.append(out.read_bytes())
    assert ckpts[0] == ckpts[1]


def test_eval_multiscale_close_to_single_scale_on_memorized_set(workspace, capsys):
    # a partially memorized model: multiscale may differ but not collapse
    data = workspace / "data"
    run(["gen-data", "--spec", workspace / "spec.txt", "--out", data])
    longer = workspace / "cfg_long.txt"
    longer.write_text(MICRO_TRAIN_CFG.replace("iterations = 3", "iterations = 200")
                      .replace("decoder = linear", "decoder = mask"))
    ckpt = workspace / "m.ckpt"
    assert run(["train", "--config", longer, "--data", data / "manifest.txt", "--out", ckpt]) == 0

    def eval_miou(extra):
        capsys.readouterr()
        assert run(["eval", "--ckpt", ckpt, "--data", data / "manifest.txt", *extra]) == 0
        out = capsys.readouterr().out
        return float(next(l for l in out.splitlines() if l.startswith("miou = ")).split(" = ")[1])

    single = eval_miou([])
    multi = eval_miou(["--multiscale"])
    assert multi >= single - 0.02


def test_infer_output_has_input_dimensions(workspace):
    # non-square, non-crop-sized input goes through the sliding window
    data = workspace / "data"
    run(["gen-data", "--spec", workspace / "spec.txt", "--out", data])
    ckpt = workspace / "m.ckpt"
    run(["train", "--config", workspace / "cfg.txt", "--data", data / "manifest.txt", "--out", ckpt])
    rng = np.random.default_rng(0)
    big = rng.integers(0, 256, (21, 34, 3), dtype=np.uint8)
    IO.write_image_ppm(workspace / "big.ppm", big)
    out = workspace / "big.pgm"
    assert run(["infer", "--ckpt", ckpt, "--image", workspace / "big.ppm", "--out", out]) == 0
    assert IO.read_labels_pgm(out).shape == (21, 34)
