import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colorflow import synthetic
from colorflow.encoder import (
    DatasetEntry,
    EncoderArch,
    EncoderModel,
    EncoderTrainParams,
    EncoderTrainState,
    FlowDataset,
    PaletteEmbedding,
    _targets,
    distill_targets,
    embed_search,
    encode,
    encoder_batch_loss,
    encoder_from_bytes,
    encoder_to_bytes,
    init_encoder,
    load_encoder,
    modulated_flow,
    moment_embedding,
    preprocess,
    read_embeddings_csv,
    save_encoder,
    train_encoder,
    write_embeddings_csv,
)
from colorflow.errors import FormatError, ValidationError
from colorflow.flow import FlowArch, FlowWeights, OptimizerState, integrate, train_flow, velocity
from colorflow.imagecore import RgbImage

from .oracles import central_difference

TINY = EncoderArch(8, (2, 4), 2)


@pytest.fixture(scope="module")
def tiny_dataset():
    rng = np.random.default_rng(11)
    imgs = [RgbImage(synthetic.palette_image(rng, 16, 16).data, f"t{i}") for i in range(6)]
    flows = [train_flow(im.cloud(), FlowArch(8), 300, 3e-3, 256, seed=i) for i, im in enumerate(imgs)]
    return FlowDataset([DatasetEntry(im, w) for im, w in zip(imgs, flows)], FlowArch(8))


SMALL = EncoderArch(16, (4, 8), 8)
SMALL_PARAMS = dict(batch_images=3, pixels_per_image=64, distill_steps=4, pool_size=512)


# ---- architecture and encoding


def test_default_output_dim():
    arch = EncoderArch()
    assert arch.dim_e == 515
    assert arch.input_size == 64 and arch.widths == (16, 32, 64, 128)
    assert arch.shapes()[-2] == (128, 515)


def test_zero_model_gives_zero_embedding(palette_images):
    model = EncoderModel(TINY, np.zeros(TINY.param_count))
    assert np.all(encode(model, palette_images[0]).e == 0)


def test_encode_length_and_determinism(palette_images):
    model = init_encoder(EncoderArch(), np.random.default_rng(0))
    a = encode(model, palette_images[1])
    b = encode(model, palette_images[1])
    assert a.e.size == 515
    assert np.array_equal(a.e, b.e)
    assert a.image_id == "p1"


def test_preprocess_resizes_and_centers(palette_images):
    x = preprocess(palette_images[0], 16)
    assert x.shape == (16, 16, 3)
    assert -0.5 <= x.min() and x.max() <= 0.5
    same = preprocess(RgbImage(np.full((16, 16, 3), 0.75, np.float32)), 16)
    assert np.allclose(same, 0.25)


def test_modulated_flow_uses_embedding(palette_images):
    model = init_encoder(SMALL, np.random.default_rng(1))
    w = modulated_flow(model, palette_images[0])
    assert w.arch == FlowArch(8)
    assert np.array_equal(w.theta, encode(model, palette_images[0]).e)


def test_bad_params_rejected():
    with pytest.raises(ValidationError):
        EncoderModel(TINY, np.zeros(3))
    with pytest.raises(ValidationError):
        EncoderArch(8, ())


# ---- distillation targets


def test_zero_flow_targets(palette_images):
    x = palette_images[0].pixels()[:50]
    z_t, t, v = distill_targets(FlowWeights.zeros(FlowArch(4)), x, steps=8, seed=0)
    assert np.all(v == 0)
    np.testing.assert_allclose(z_t, x)


def test_interpolation_endpoints(small_flows, palette_images):
    x = palette_images[0].pixels()[:20]
    Z = integrate(small_flows[0], x, 16)
    z0, _, v = _targets(small_flows[0], x, Z, np.zeros(20), "displacement")
    z1, _, _ = _targets(small_flows[0], x, Z, np.ones(20), "displacement")
    assert np.array_equal(z0, x) and np.array_equal(z1, Z)
    np.testing.assert_array_equal(v, Z - x)


def test_velocity_mode_uses_teacher(small_flows, palette_images):
    x = palette_images[0].pixels()[:20]
    z_t, t, v = distill_targets(small_flows[0], x, steps=8, seed=3, mode="velocity")
    np.testing.assert_array_equal(v, velocity(small_flows[0], z_t, t))
    with pytest.raises(ValidationError):
        distill_targets(small_flows[0], x, mode="other")


def test_displacement_and_velocity_targets_agree():
    # compact clouds fan out to the cube along nearly straight paths
    rng = np.random.default_rng(11)
    for i in range(3):
        img = synthetic.gaussian_image(rng, rng.uniform(0.3, 0.7, 3), np.eye(3) * 0.0025, 48, 48)
        w = train_flow(img.cloud(), FlowArch(32), 2500, 2e-3, 1024, seed=i)
        z_t, t, disp = distill_targets(w, img.pixels(), steps=32, seed=0)
        gap = np.linalg.norm(disp - velocity(w, z_t, t), axis=1)
        assert np.median(gap) <= 0.1


# ---- gradient


def encoder_fd_error(seed, batch=2, pixels=5):
    rng = np.random.default_rng(seed)
    model = init_encoder(TINY, rng)
    model.params = model.params + rng.normal(0, 0.3, model.params.size)
    images = rng.random((batch, 8, 8, 3)) - 0.5
    batches = [(np.column_stack([rng.random((pixels, 3)), rng.random(pixels)]), rng.normal(size=(pixels, 3)))
               for _ in range(batch)]  # fmt: skip
    _, grad = encoder_batch_loss(model, images, batches)

    def f(p):
        return encoder_batch_loss(EncoderModel(TINY, p), images, batches, with_grad=False)[0]

    fd = central_difference(f, model.params, h=1e-5)
    fd = np.array([fd[i] for i in range(model.params.size)])
    return np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)


@given(st.integers(0, 2**31))
@settings(max_examples=8, deadline=None)
def test_encoder_gradient_matches_central_differences(seed):
    assert encoder_fd_error(seed) <= 1e-2


# ---- training


def test_train_rejects_mismatched_arch(tiny_dataset):
    with pytest.raises(ValidationError):
        train_encoder(tiny_dataset, EncoderArch(16, (4,), 16), EncoderTrainParams(iters=1))
    with pytest.raises(ValidationError):
        FlowDataset([DatasetEntry(tiny_dataset.entries[0].image, FlowWeights.zeros(FlowArch(4)))], FlowArch(8))
    with pytest.raises(ValidationError):
        train_encoder(FlowDataset([], FlowArch(8)), SMALL, EncoderTrainParams(iters=1))


def test_default_training_params():
    p = EncoderTrainParams()
    assert p.batch_images == 8 and p.lr == 5e-4 and p.lr_drop == 1e-4
    assert p.pixels_per_image == 1024


def test_training_deterministic_and_resumable(tiny_dataset):
    params = EncoderTrainParams(iters=40, lr=1e-3, drop_at=25, seed=5, **SMALL_PARAMS)
    full_hist, a_hist = [], []
    full = train_encoder(tiny_dataset, SMALL, params, history=full_hist)
    again = train_encoder(tiny_dataset, SMALL, params, history=a_hist)
    assert np.array_equal(full.params, again.params) and full_hist == a_hist

    captured = {}

    def keep(state, loss):
        if state.iteration == 17:
            captured["state"] = EncoderTrainState(
                EncoderModel(state.model.arch, state.model.params.copy()),
                OptimizerState(state.opt.m.copy(), state.opt.v.copy(), state.opt.step, state.opt.lr),
                state.iteration,
            )

    train_encoder(tiny_dataset, SMALL, EncoderTrainParams(iters=17, lr=1e-3, drop_at=25, seed=5, **SMALL_PARAMS),
                  callback=keep)  # fmt: skip
    resumed_hist = []
    resumed = train_encoder(tiny_dataset, SMALL, params, resume=captured["state"], history=resumed_hist)
    assert np.array_equal(resumed.params, full.params)
    assert resumed_hist == full_hist[17:]
    assert resumed.meta["iterations"] == 40


def test_overfit_single_pair():
    rng = np.random.default_rng(21)
    img = RgbImage(synthetic.palette_image(rng, 40, 40).data, "solo")
    w = train_flow(img.cloud(), FlowArch(64), 4000, 1e-3, 1024, seed=0)
    ds = FlowDataset([DatasetEntry(img, w)], FlowArch(64))
    hist = []
    train_encoder(ds, EncoderArch(32, (8, 16, 32), 64), EncoderTrainParams(iters=5000, lr=1e-3, drop_at=4000,
                  batch_images=1, seed=0), history=hist)  # fmt: skip
    # the encoder regresses a deterministic target; the flow's loss includes the coupling variance
    assert np.mean(hist[-200:]) <= 3 * w.meta.final_loss
    assert np.mean(hist[-200:]) < 0.2 * np.mean(hist[:50])


@pytest.fixture(scope="module")
def hue_setup():
    rng = np.random.default_rng(4)
    hues = [0.0, 0.33, 0.6, 0.8]
    imgs, labels, flows = [], [], []
    for i in range(32):
        label = i % 4
        img = RgbImage(synthetic.hue_palette_image(rng, hues[label], 24, 24).data, f"h{i:02d}")
        imgs.append(img)
        labels.append(label)
        flows.append(train_flow(img.cloud(), FlowArch(16), 800, 3e-3, 512, seed=i))
    ds = FlowDataset([DatasetEntry(im, w) for im, w in zip(imgs, flows)], FlowArch(16))
    hist = []
    model = train_encoder(ds, EncoderArch(24, (8, 16, 32), 16), EncoderTrainParams(iters=600, lr=2e-3, drop_at=None,
                          pixels_per_image=256, distill_steps=8, seed=0), history=hist)  # fmt: skip
    return imgs, labels, model, hist


def test_training_curve_decreases(hue_setup):
    _, _, _, hist = hue_setup
    assert np.all(np.isfinite(hist))
    assert np.median(hist[-100:]) < np.median(hist[:100])


def test_nearest_neighbour_shares_hue(hue_setup):
    imgs, labels, model, _ = hue_setup
    db = [encode(model, im) for im in imgs]
    hits = 0
    for q, lab in zip(db, labels):
        ranked = embed_search(db, q, 2)
        assert ranked[0] == (q.image_id, 0.0)
        nn = int(ranked[1][0][1:])
        hits += labels[nn] == lab
    # chance is 7/31 for 4 balanced hue classes
    assert hits / len(db) > 0.5


# ---- search and moments


def test_search_basics():
    db = [PaletteEmbedding(np.array([float(i), 0.0]), f"id{i}") for i in range(5)]
    assert embed_search(db, db[3], 1) == [("id3", 0.0)]
    assert len(embed_search(db, db[0], 50)) == 5
    tie = [PaletteEmbedding(np.array([1.0, 0.0]), "b"), PaletteEmbedding(np.array([-1.0, 0.0]), "a")]
    assert [r[0] for r in embed_search(tie, PaletteEmbedding(np.zeros(2)), 2)] == ["a", "b"]
    with pytest.raises(ValidationError):
        embed_search(db, PaletteEmbedding(np.zeros(3)), 1)
    with pytest.raises(ValidationError):
        embed_search([], db[0], 1)


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.integers(1, 20))
@settings(max_examples=30, deadline=None)
def test_search_sorted_ascending(q, n):
    rng = np.random.default_rng(n)
    db = [PaletteEmbedding(rng.normal(size=3), f"x{i}") for i in range(n)]
    res = embed_search(db, PaletteEmbedding(np.array(q)), n)
    d = [r[1] for r in res]
    assert d == sorted(d) and len(res) == n


def test_moments_uniform_color():
    m = moment_embedding(synthetic.uniform_image([0.2, 0.4, 0.6]))
    assert m.size == 12
    np.testing.assert_allclose(m[:3], [0.2, 0.4, 0.6], atol=1e-7)
    np.testing.assert_allclose(m[3:], 0, atol=1e-12)


def test_moments_black_white():
    data = np.zeros((4, 4, 3), np.float32)
    data[:, :2] = 1
    m = moment_embedding(RgbImage(data))
    np.testing.assert_allclose(m[:3], 0.5)
    np.testing.assert_allclose(m[3:], 0.25)


# ---- files


def test_checkpoint_roundtrip(tmp_path):
    model = init_encoder(SMALL, np.random.default_rng(2))
    model.params = model.params.astype(np.float32).astype(np.float64)
    model.meta = {"iterations": 3, "seed": 1}
    save_encoder(model, tmp_path / "a.menc")
    back = load_encoder(tmp_path / "a.menc")
    assert back.arch == SMALL and back.meta == model.meta
    assert np.array_equal(back.params, model.params)
    save_encoder(back, tmp_path / "b.menc")
    assert (tmp_path / "a.menc").read_bytes() == (tmp_path / "b.menc").read_bytes()


def test_checkpoint_header():
    buf = encoder_to_bytes(EncoderModel(TINY, np.zeros(TINY.param_count)))
    assert buf[:4] == b"MENC"
    assert np.frombuffer(buf[4:32], "<u4").tolist() == [1, 8, 2, 2, 4, 19, TINY.param_count]


@pytest.mark.parametrize("cut", [3, 20, -1])
def test_corrupt_checkpoint(cut):
    buf = encoder_to_bytes(EncoderModel(TINY, np.zeros(TINY.param_count)))
    with pytest.raises(FormatError):
        encoder_from_bytes(buf[:cut])


def test_embeddings_csv_roundtrip(tmp_path, rng):
    db = [PaletteEmbedding(rng.normal(size=515), f"img{i}") for i in range(3)]
    write_embeddings_csv(db, tmp_path / "e.csv")
    header = (tmp_path / "e.csv").read_text().splitlines()[0].split(",")
    assert header[0] == "id" and len(header) == 516
    back = read_embeddings_csv(tmp_path / "e.csv")
    assert [b.image_id for b in back] == ["img0", "img1", "img2"]
    assert all(np.array_equal(a.e, b.e) for a, b in zip(db, back))
