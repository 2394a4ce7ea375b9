import csv
import math
import shutil

import numpy as np
import pytest

from colorflow import synthetic
from colorflow.cli import build_parser, cmd_search, image_seed, run
from colorflow.config import Manifest, RunConfig
from colorflow.encoder import EncoderArch, init_encoder, load_encoder, save_encoder
from colorflow.flow import load_flow
from colorflow.imagecore import RgbImage, load_image, save_image
from colorflow.otmetrics import evaluate_transfer

FAST_FLOW = ["--hidden", "8", "--flow-iters", "60", "--flow-batch", "128", "--seed", "3", "-q"]
FAST_ENCODER = [
    "--encoder-input", "16", "--encoder-widths", "4,8", "--pixels-per-image", "64", "--batch-images", "2",
    "--distill-steps", "4", "--log-every", "5", "--checkpoint-every", "10", "-q",
]  # fmt: skip


@pytest.fixture
def image_dir(tmp_path):
    d = tmp_path / "imgs"
    d.mkdir()
    for img in synthetic.corpus(1, 3, 20, 20):
        save_image(img, d / f"{img.source_id}.png")
    return d


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ---- train-flow


def test_train_flow_default_arch(tmp_path, image_dir):
    out = tmp_path / "w.modf"
    assert run(["train-flow", str(image_dir / "img0000.png"), str(out), "--flow-iters", "2", "--flow-batch", "8", "-q"]) == 0
    w = load_flow(out)
    assert w.arch.hidden == 1024 and w.theta.size == 8195
    assert w.meta.iterations == 2 and w.meta.source_id == "img0000"


def test_train_flow_hidden_64(tmp_path, image_dir):
    out = tmp_path / "w.modf"
    assert run(["train-flow", str(image_dir / "img0001.png"), str(out), "--hidden", "64", "--flow-iters", "5", "-q"]) == 0
    assert load_flow(out).theta.size == 515


def test_train_flow_errors(tmp_path, image_dir):
    assert run(["train-flow", str(tmp_path / "missing.png"), str(tmp_path / "w.modf"), "-q"]) == 3
    assert run(["train-flow", str(image_dir / "img0000.png"), str(tmp_path / "w.modf"), "--hidden", "0", "-q"]) == 1
    args = ["train-flow", str(image_dir / "img0000.png"), str(tmp_path / "w.modf"), "--hidden", "8",
            "--flow-iters", "300", "--flow-lr", "10000", "-q"]  # fmt: skip
    assert run(args) == 2


def test_config_file_and_flag_override(tmp_path, image_dir):
    (tmp_path / "c.txt").write_text(RunConfig(hidden=4, flow_iters=3, flow_batch=16).to_text())
    out = tmp_path / "w.modf"
    assert run(["train-flow", str(image_dir / "img0000.png"), str(out), "--config", str(tmp_path / "c.txt"),
                "--hidden", "6", "-q"]) == 0  # fmt: skip
    w = load_flow(out)
    assert w.arch.hidden == 6 and w.meta.iterations == 3


def test_flags_mirror_run_config():
    parser = build_parser()
    args = parser.parse_args(["transfer", "a", "b", "c"])
    assert args.steps is None  # unset flags fall back to RunConfig
    assert RunConfig().steps == 8
    for name in ("--tile-size", "--threads", "--strength", "--blend", "--encoder-widths", "--projections"):
        assert name in parser._subparsers._group_actions[0].choices["transfer"].format_help()


# ---- build-dataset


def test_build_dataset_and_resume(tmp_path, image_dir, capsys):
    out = tmp_path / "ds"
    assert run(["build-dataset", str(image_dir), str(out)] + FAST_FLOW) == 0
    m = Manifest.read(out / "manifest.txt")
    assert [e.id for e in m.entries] == ["img0000", "img0001", "img0002"]
    assert m.arch.hidden == 8
    assert all(e.status == "ok" and e.iterations == 60 and e.final_loss is not None for e in m.entries)
    assert m.entries[0].image == "../imgs/img0000.png"
    assert m.entries[0].seed == image_seed(3, "img0000")
    files = {p.name: (p.stat().st_mtime_ns, p.read_bytes()) for p in (out / "flows").iterdir()}

    # completed run: nothing retrained
    assert run(["build-dataset", str(image_dir), str(out)] + FAST_FLOW) == 0
    assert {p.name: (p.stat().st_mtime_ns, p.read_bytes()) for p in (out / "flows").iterdir()} == files

    # interrupted run: only the missing entry is trained, and it comes out identical
    (out / "flows" / "img0001.modf").unlink()
    assert run(["build-dataset", str(image_dir), str(out)] + FAST_FLOW) == 0
    after = {p.name: (p.stat().st_mtime_ns, p.read_bytes()) for p in (out / "flows").iterdir()}
    assert after["img0000.modf"] == files["img0000.modf"] and after["img0002.modf"] == files["img0002.modf"]
    assert after["img0001.modf"][1] == files["img0001.modf"][1]
    assert Manifest.read(out / "manifest.txt") == m


def test_build_dataset_parallel_matches_serial(tmp_path, image_dir):
    assert run(["build-dataset", str(image_dir), str(tmp_path / "a")] + FAST_FLOW) == 0
    assert run(["build-dataset", str(image_dir), str(tmp_path / "b"), "--threads", "2"] + FAST_FLOW) == 0
    for name in ("img0000.modf", "img0001.modf", "img0002.modf"):
        assert (tmp_path / "a" / "flows" / name).read_bytes() == (tmp_path / "b" / "flows" / name).read_bytes()


def test_build_dataset_records_failures(tmp_path, image_dir):
    (image_dir / "broken.png").write_bytes(b"\x89PNG\r\n\x1a\nnot really")
    out = tmp_path / "ds"
    assert run(["build-dataset", str(image_dir), str(out)] + FAST_FLOW) == 3
    status = {e.id: e.status for e in Manifest.read(out / "manifest.txt").entries}
    assert status["broken"] == "failed:ImageIOError"
    assert status["img0000"] == "ok"


def test_build_dataset_empty_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run(["build-dataset", str(tmp_path / "empty"), str(tmp_path / "ds"), "-q"]) == 1
    assert run(["build-dataset", str(tmp_path / "nope"), str(tmp_path / "ds"), "-q"]) == 3


# ---- train-encoder


@pytest.fixture
def dataset(tmp_path, image_dir):
    out = tmp_path / "ds"
    assert run(["build-dataset", str(image_dir), str(out)] + FAST_FLOW) == 0
    return out / "manifest.txt"


def test_train_encoder_logs_and_checkpoints(tmp_path, dataset):
    out = tmp_path / "enc.menc"
    assert run(["train-encoder", str(dataset), str(out), "--encoder-iters", "20", "--hidden", "8"] + FAST_ENCODER) == 0
    table = rows(tmp_path / "enc.loss.csv")
    assert table[0] == ["iteration", "loss", "lr"]
    assert [r[0] for r in table[1:]] == ["5", "10", "15", "20"]
    model = load_encoder(out)
    assert model.arch == EncoderArch(16, (4, 8), 8)
    assert model.meta["iterations"] == 20
    assert (tmp_path / "enc.menc.state.npz").exists()


def test_train_encoder_lr_drop_logged(tmp_path, dataset):
    out = tmp_path / "enc.menc"
    args = ["train-encoder", str(dataset), str(out), "--encoder-iters", "20", "--encoder-drop-at", "10"]
    assert run(args + FAST_ENCODER) == 0
    lrs = [float(r[2]) for r in rows(tmp_path / "enc.loss.csv")[1:]]
    assert lrs == [5e-4, 5e-4, 1e-4, 1e-4]


def test_train_encoder_resume_matches_uninterrupted(tmp_path, dataset):
    full = tmp_path / "full.menc"
    part = tmp_path / "part.menc"
    assert run(["train-encoder", str(dataset), str(full), "--encoder-iters", "30"] + FAST_ENCODER) == 0
    assert run(["train-encoder", str(dataset), str(part), "--encoder-iters", "10"] + FAST_ENCODER) == 0
    assert run(["train-encoder", str(dataset), str(part), "--encoder-iters", "30", "--resume"] + FAST_ENCODER) == 0
    assert part.read_bytes() == full.read_bytes()
    assert rows(tmp_path / "part.loss.csv") == rows(tmp_path / "full.loss.csv")


def test_train_encoder_arch_mismatch(tmp_path, dataset):
    # checkpoint built for other widths cannot be resumed
    assert run(["train-encoder", str(dataset), str(tmp_path / "e.menc"), "--encoder-iters", "10"] + FAST_ENCODER) == 0
    args = ["train-encoder", str(dataset), str(tmp_path / "e.menc"), "--encoder-iters", "20", "--resume",
            "--encoder-widths", "4,4"]  # fmt: skip
    assert run(args + FAST_ENCODER[2:]) == 1


# ---- transfer


def test_transfer_strength_zero_is_content(tmp_path, image_dir):
    out = tmp_path / "o.png"
    args = ["transfer", str(image_dir / "img0000.png"), str(image_dir / "img0001.png"), str(out), "--mode", "direct",
            "--strength", "0"] + FAST_FLOW  # fmt: skip
    assert run(args) == 0
    assert np.array_equal(load_image(out).data, load_image(image_dir / "img0000.png").data)


def test_transfer_encoder_mode(tmp_path, image_dir, dataset):
    enc = tmp_path / "enc.menc"
    assert run(["train-encoder", str(dataset), str(enc), "--encoder-iters", "10", "--hidden", "8"] + FAST_ENCODER) == 0
    out = tmp_path / "o.png"
    rep = tmp_path / "r.csv"
    args = ["transfer", str(image_dir / "img0000.png"), str(image_dir / "img0002.png"), str(out), "--encoder", str(enc),
            "--report", str(rep), "-q"]  # fmt: skip
    assert run(args) == 0
    assert load_image(out).data.shape == (20, 20, 3)
    table = rows(rep)
    assert table[0][:3] == ["method", "content", "style"] and table[1][:3] == ["encoder", "img0000", "img0002"]


def test_transfer_missing_encoder(tmp_path, image_dir):
    base = ["transfer", str(image_dir / "img0000.png"), str(image_dir / "img0001.png"), str(tmp_path / "o.png"), "-q"]
    assert run(base) == 1
    assert run(base + ["--encoder", str(tmp_path / "none.menc")]) == 3


def test_transfer_mkl_beats_identity(tmp_path, capsys):
    rng = np.random.default_rng(5)
    c = synthetic.gaussian_image(rng, [0.3, 0.35, 0.4], np.diag([0.004, 0.006, 0.005]), 32, 32)
    s = synthetic.gaussian_image(rng, [0.65, 0.5, 0.35], [[0.01, 0.004, 0], [0.004, 0.008, 0], [0, 0, 0.003]], 32, 32)
    save_image(c, tmp_path / "c.png")
    save_image(s, tmp_path / "s.png")
    args = ["transfer", str(tmp_path / "c.png"), str(tmp_path / "s.png"), str(tmp_path / "o.png"), "--mode", "mkl",
            "--report", str(tmp_path / "r.csv"), "-q"]  # fmt: skip
    assert run(args) == 0
    mkl_style = float(rows(tmp_path / "r.csv")[1][3])
    c, s = load_image(tmp_path / "c.png"), load_image(tmp_path / "s.png")
    identity = evaluate_transfer(c, s, c, lambda x: x)
    assert mkl_style < identity.style_distance
    assert "style" in capsys.readouterr().out


# ---- search


def moment_matched(path, levels, weights, size=32):
    """Gray image whose pixels take the given codes in the given proportions."""
    counts = [int(round(w * size * size)) for w in weights]
    vals = np.concatenate([np.full(c, v) for v, c in zip(levels, counts)])
    data = np.repeat(vals.reshape(size, size, 1), 3, axis=2) / 255.0
    save_image(RgbImage(data), path)


@pytest.fixture
def crafted_corpus(tmp_path):
    d = tmp_path / "corpus"
    d.mkdir()
    # mean 128 and variance 24^2 for all three, different shapes
    moment_matched(d / "a_two.png", [104, 152], [0.5, 0.5])
    moment_matched(d / "b_three.png", [80, 128, 176], [0.125, 0.75, 0.125])
    moment_matched(d / "c_spiky.png", [32, 128, 224], [1 / 32, 15 / 16, 1 / 32])
    save_image(synthetic.palette_image(np.random.default_rng(0), 32, 32), d / "d_color.png")
    enc = tmp_path / "e.menc"
    save_encoder(init_encoder(EncoderArch(16, (4, 8), 8), np.random.default_rng(1)), enc)
    return d, enc


def test_search_query_first_and_k(crafted_corpus, capsys):
    d, enc = crafted_corpus
    assert run(["search", str(d), str(d / "b_three.png"), "-k", "1", "--encoder", str(enc), "-q"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines == ["1\tb_three\t0.000000"]
    assert run(["search", str(d), str(d / "b_three.png"), "--baseline", "-q"]) == 0
    assert capsys.readouterr().out.splitlines()[0].split("\t")[1] == "b_three"


def test_search_embedding_separates_matched_moments(crafted_corpus):
    d, enc = crafted_corpus
    moments = dict(cmd_search(d, d / "a_two.png", 4, baseline=True))
    embedded = dict(cmd_search(d, d / "a_two.png", 4, encoder_path=enc))
    # the moment baseline cannot tell the three gray palettes apart, the embedding can
    assert moments["b_three"] < 1e-6 and moments["c_spiky"] < 1e-6
    assert embedded["b_three"] > 1e-3 and embedded["c_spiky"] > 1e-3
    assert moments["d_color"] > 1e-3


def test_search_writes_embeddings(tmp_path, crafted_corpus):
    d, enc = crafted_corpus
    assert run(["search", str(d), str(d / "a_two.png"), "--encoder", str(enc), "--embeddings-out",
                str(tmp_path / "e.csv"), "-q"]) == 0  # fmt: skip
    assert [r[0] for r in rows(tmp_path / "e.csv")[1:]] == ["a_two", "b_three", "c_spiky", "d_color"]


def test_search_needs_encoder(crafted_corpus):
    d, _ = crafted_corpus
    assert run(["search", str(d), str(d / "a_two.png"), "-q"]) == 1


# ---- eval


@pytest.fixture
def eval_setup(tmp_path, image_dir):
    outs = tmp_path / "outs"
    outs.mkdir()
    for name in ("img0000", "img0001"):
        shutil.copy(image_dir / f"{name}.png", outs / f"{name}_out.png")
    return tmp_path, image_dir, outs


def test_eval_empty_pairs(tmp_path):
    (tmp_path / "pairs.csv").write_text("")
    assert run(["eval", str(tmp_path / "pairs.csv"), str(tmp_path), str(tmp_path / "r.csv"), "-q"]) == 0
    assert rows(tmp_path / "r.csv") == [
        ["method", "content", "style", "style_distance", "content_distance", "aggregated", "lipschitz"]
    ]


def test_eval_duplicates_and_summary(eval_setup):
    tmp, imgs, outs = eval_setup
    lines = ["content,style,output,method"]
    lines += ["imgs/img0000.png,imgs/img0001.png,img0000_out.png,a"] * 2
    lines += ["imgs/img0001.png,imgs/img0000.png,img0001_out.png,a", "imgs/img0000.png,imgs/img0002.png,img0000_out.png,b"]
    (tmp / "pairs.csv").write_text("\n".join(lines) + "\n")
    assert run(["eval", str(tmp / "pairs.csv"), str(outs), str(tmp / "r.csv"), "-q"]) == 0
    table = rows(tmp / "r.csv")
    assert len(table) == 5 and table[1] == table[2]
    summary = rows(tmp / "r_summary.csv")
    assert summary[0][:4] == ["method", "n", "style_distance_mean", "style_distance_sem"]
    a = [float(r[3]) for r in table[1:4]]
    mean = sum(a) / 3
    sem = math.sqrt(sum((v - mean) ** 2 for v in a) / 2) / math.sqrt(3)
    assert summary[1][0] == "a" and summary[1][1] == "3"
    assert float(summary[1][2]) == pytest.approx(mean, abs=1e-6)
    assert float(summary[1][3]) == pytest.approx(sem, abs=1e-6)


def test_eval_missing_files(eval_setup, capsys):
    tmp, imgs, outs = eval_setup
    (tmp / "pairs.csv").write_text("content,style,output,method\nimgs/img0000.png,imgs/nope.png,gone.png,a\n")
    assert run(["eval", str(tmp / "pairs.csv"), str(outs), str(tmp / "r.csv"), "-q"]) == 3
    err = capsys.readouterr().err
    assert "nope.png" in err and "gone.png" in err


def test_eval_bad_columns(tmp_path):
    (tmp_path / "pairs.csv").write_text("a,b\n1,2\n")
    assert run(["eval", str(tmp_path / "pairs.csv"), str(tmp_path), str(tmp_path / "r.csv"), "-q"]) == 1


def test_commands_do_not_mutate_inputs(tmp_path, image_dir, dataset):
    before = {p: p.read_bytes() for p in image_dir.iterdir()}
    manifest_before = dataset.read_bytes()
    run(["train-encoder", str(dataset), str(tmp_path / "e.menc"), "--encoder-iters", "5"] + FAST_ENCODER)
    run(["transfer", str(image_dir / "img0000.png"), str(image_dir / "img0001.png"), str(tmp_path / "o.png"),
         "--encoder", str(tmp_path / "e.menc"), "-q"])  # fmt: skip
    assert {p: p.read_bytes() for p in image_dir.iterdir()} == before
    assert dataset.read_bytes() == manifest_before
