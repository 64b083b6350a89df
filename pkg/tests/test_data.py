import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plantdet.checkpoint import decode_checkpoint, load_checkpoint, save_checkpoint
from plantdet.data import (
    Annotation,
    Dataset,
    DatasetIndex,
    SyntheticSceneConfig,
    format_yolo_label,
    generate_synthetic_dataset,
    parse_voc_xml,
    parse_yolo_label,
    read_ppm,
    resize_image,
    split_counts,
    split_dataset,
    write_ppm,
    write_voc_xml,
)
from plantdet.data.resize import plan_resize
from plantdet.data.synth import image_rng, render_scene
from plantdet.errors import ConfigError, DataError, FormatError
from plantdet.model import BackboneConfig, build_model
from plantdet.tensor import Tensor, no_grad


# -- YOLO labels ------------------------------------------------------------------------

def test_parse_yolo_examples():
    assert parse_yolo_label("0 0.5 0.5 0.2 0.2") == [Annotation(0, 0.5, 0.5, 0.2, 0.2)]
    assert parse_yolo_label("") == []
    assert parse_yolo_label("\n  \n1 0.25 0.25 0.5 0.5\n") == [Annotation(1, 0.25, 0.25, 0.5, 0.5)]


@pytest.mark.parametrize("text,line", [
    ("0 0.5 0.5 0.2 0.2\n0 0.5 x 0.2 0.2", 2),
    ("3 0.5 0.5 0.2 0.2", 1),
    ("0 1.5 0.5 0.2 0.2", 1),
    ("0 0.5 0.5 0.2", 1),
    ("0 0.95 0.5 0.2 0.2", 1),
])
def test_parse_yolo_errors(text, line):
    with pytest.raises(DataError, match=f"lbl.txt:{line}:"):
        parse_yolo_label(text, nc=3, source="lbl.txt")


@st.composite
def annotation_lists(draw):
    n = draw(st.integers(0, 8))
    out = []
    for _ in range(n):
        w = draw(st.integers(1, 500_000)) / 1e6
        h = draw(st.integers(1, 500_000)) / 1e6
        cx = draw(st.integers(int(w * 5e5) + 1, int(1e6 - w * 5e5) - 1)) / 1e6
        cy = draw(st.integers(int(h * 5e5) + 1, int(1e6 - h * 5e5) - 1)) / 1e6
        out.append(Annotation(draw(st.integers(0, 20)), cx, cy, w, h))
    return out


@settings(max_examples=200, deadline=None)
@given(annotation_lists())
def test_yolo_roundtrip(anns):
    assert parse_yolo_label(format_yolo_label(anns), nc=21) == anns


# -- VOC ------------------------------------------------------------------------------------

VOC = """<annotation><size><width>{w}</width><height>{h}</height></size>{objs}</annotation>"""
OBJ = "<object><name>{n}</name><bndbox><xmin>{a}</xmin><ymin>{b}</ymin><xmax>{c}</xmax><ymax>{d}</ymax></bndbox></object>"


def test_voc_full_image_and_empty():
    text = VOC.format(w=300, h=200, objs=OBJ.format(n="fern", a=0, b=0, c=300, d=200))
    assert parse_voc_xml(text, ["moss", "fern"]) == [Annotation(1, 0.5, 0.5, 1.0, 1.0)]
    assert parse_voc_xml(VOC.format(w=300, h=200, objs=""), ["moss"]) == []


def test_voc_errors():
    with pytest.raises(DataError, match="unknown class"):
        parse_voc_xml(VOC.format(w=10, h=10, objs=OBJ.format(n="oak", a=0, b=0, c=5, d=5)), ["fern"])
    with pytest.raises(DataError, match="malformed"):
        parse_voc_xml("<annotation><size>", ["fern"])


def test_voc_yolo_voc_roundtrip():
    rng = np.random.default_rng(0)
    names = ["a", "b", "c"]
    for _ in range(50):
        w, h = int(rng.integers(50, 4000)), int(rng.integers(50, 4000))
        objs, corners = "", []
        for _ in range(rng.integers(1, 6)):
            x1, y1 = int(rng.integers(0, w - 5)), int(rng.integers(0, h - 5))
            x2, y2 = int(rng.integers(x1 + 1, w + 1)), int(rng.integers(y1 + 1, h + 1))
            objs += OBJ.format(n=names[rng.integers(0, 3)], a=x1, b=y1, c=x2, d=y2)
            corners.append((x1, y1, x2, y2))
        anns = parse_voc_xml(VOC.format(w=w, h=h, objs=objs), names)
        yolo = parse_yolo_label(format_yolo_label(anns), nc=3)
        back = parse_voc_xml(write_voc_xml(yolo, names, w, h), names)
        for a, (x1, y1, x2, y2) in zip(back, corners):
            got = ((a.cx - a.w / 2) * w, (a.cy - a.h / 2) * h, (a.cx + a.w / 2) * w, (a.cy + a.h / 2) * h)
            assert np.allclose(got, (x1, y1, x2, y2), atol=0.5)


# -- PPM and resize ---------------------------------------------------------------------------

def test_ppm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (7, 5, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    (tmp_path / "c.ppm").write_bytes(b"P6\n# comment\n2 1\n255\n" + bytes(range(6)))
    assert read_ppm(tmp_path / "c.ppm").tolist() == [[[0, 1, 2], [3, 4, 5]]]
    (tmp_path / "b.ppm").write_bytes(b"P6\n4 4\n255\n\x00\x01")
    with pytest.raises(DataError, match="truncated"):
        read_ppm(tmp_path / "b.ppm")


def test_resize_square_modes_agree(rng):
    img = rng.integers(0, 256, (96, 96, 3), dtype=np.uint8)
    a, ta = resize_image(img, 64, "stretch")
    b, tb = resize_image(img, 64, "letterbox")
    assert np.array_equal(a, b) and ta == tb


def test_resize_full_resolution():
    tf = plan_resize((2160, 3840), 640, "stretch")
    assert tf.scale == (640 / 3840, 640 / 2160)
    lb = plan_resize((2160, 3840), 640, "letterbox")
    assert lb.sx == lb.sy == pytest.approx(1 / 6) and lb.px == 0 and lb.py == 140


def test_resize_letterbox_pads(rng):
    img = rng.integers(0, 256, (40, 80, 3), dtype=np.uint8)
    out, tf = resize_image(img, 64, "letterbox")
    assert out.shape == (64, 64, 3)
    assert np.all(out[:16] == 114) and np.all(out[48:] == 114)


def test_resize_errors():
    with pytest.raises(DataError):
        resize_image(np.zeros((0, 5, 3), np.uint8), 64)
    with pytest.raises(ConfigError):
        resize_image(np.zeros((5, 5, 3), np.uint8), 100)


@pytest.mark.parametrize("mode", ["stretch", "letterbox"])
def test_transform_roundtrip(mode, rng):
    tf = plan_resize((int(rng.integers(10, 3000)), int(rng.integers(10, 3000))), 640, mode)
    boxes = rng.uniform(0, 600, (100, 4))
    assert np.abs(tf.inverse_pixels(tf.forward_pixels(boxes)) - boxes).max() < 1e-6
    ann = np.c_[np.zeros(100), rng.uniform(0.2, 0.8, (100, 2)), rng.uniform(0.01, 0.3, (100, 2))]
    assert np.abs(tf.inverse_normalized(tf.forward_normalized(ann)) - ann).max() < 1e-6


# -- split ------------------------------------------------------------------------------------

def fake_index(n):
    return DatasetIndex("/nonexistent", tuple(f"images/{i}.ppm" for i in range(n)),
                        tuple(f"labels/{i}.txt" for i in range(n)), ("a",))


def test_split_counts():
    assert split_counts(10) == (8, 1, 1)
    assert split_counts(6965) == (5572, 696, 697)
    with pytest.raises(DataError):
        split_counts(2)


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 3000), st.integers(0, 2 ** 31))
def test_split_disjoint_exhaustive_deterministic(n, seed):
    a = split_dataset(fake_index(n), seed)
    b = split_dataset(fake_index(n), seed)
    assert a.splits == b.splits
    parts = [set(a.splits[k]) for k in ("train", "val", "test")]
    assert sum(len(p) for p in parts) == n and set.union(*parts) == set(range(n))
    assert tuple(len(p) for p in parts) == split_counts(n)


# -- synthetic scenes --------------------------------------------------------------------------

def test_synthetic_no_occlusion_labels_every_leaf():
    cfg = SyntheticSceneConfig(image_size=128, classes=4, leaves=(3, 6), occlusion=0.0)
    for i in range(10):
        _, anns, ids = render_scene(cfg, image_rng(0, i))
        assert len(anns) == ids.max()


def test_synthetic_boxes_bound_visible_pixels():
    cfg = SyntheticSceneConfig(image_size=128, classes=3, leaves=(2, 5), background_noise=0.0)
    bg = np.array([96, 72, 48])
    for i in range(10):
        img, anns, _ = render_scene(cfg, image_rng(3, i))
        leaf = np.any(img != bg, axis=2)
        for a in anns:
            x1, x2 = (a.cx - a.w / 2) * 128, (a.cx + a.w / 2) * 128
            y1, y2 = (a.cy - a.h / 2) * 128, (a.cy + a.h / 2) * 128
            r = [max(0, int(x1) - 2), max(0, int(y1) - 2), min(128, int(x2) + 2), min(128, int(y2) + 2)]
            ys, xs = np.nonzero(leaf[r[1]:r[3], r[0]:r[2]])
            scan = (xs.min() + r[0], ys.min() + r[1], xs.max() + r[0] + 1, ys.max() + r[1] + 1)
            assert np.allclose(scan, (x1, y1, x2, y2), atol=1.0)


def test_synthetic_occlusion_hides_some_leaves():
    cfg = SyntheticSceneConfig(image_size=128, leaves=(12, 14), occlusion=1.0, size_range=(0.3, 0.45))
    hidden = 0
    for i in range(5):
        _, anns, ids = render_scene(cfg, image_rng(1, i))
        hidden += ids.max() - len(anns)
    assert hidden > 0


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synthetic_dataset_deterministic(tmp_path):
    cfg = SyntheticSceneConfig(image_size=64, classes=2, seed=5)
    a = generate_synthetic_dataset(cfg, 12, tmp_path / "a")
    b = generate_synthetic_dataset(cfg, 12, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    assert len(a) == 12 and a.splits == b.splits
    loaded = DatasetIndex.load(tmp_path / "a")
    assert loaded.images == a.images and loaded.splits == a.splits
    scanned = DatasetIndex.scan(tmp_path / "a")
    assert scanned.images == a.images


def test_dataset_batches(tmp_path):
    idx = generate_synthetic_dataset(SyntheticSceneConfig(image_size=64), 10, tmp_path)
    ds = Dataset(idx, "train", img_size=96)
    batches = list(ds.batches(3, shuffle=True, rng=np.random.default_rng(0)))
    assert [b.images.shape for b in batches] == [(3, 3, 96, 96)] * 2 + [(2, 3, 96, 96)]
    assert sorted(sum((b.indices for b in batches), [])) == list(range(8))
    with pytest.raises(DataError):
        Dataset(idx, "nope")


# -- checkpoints --------------------------------------------------------------------------------

@pytest.fixture
def trained_like_model(rng):
    model = build_model(BackboneConfig(width=8, head_dim=16), nc=3, seed=4, class_names=["x", "y", "z"])
    x = Tensor(rng.standard_normal((2, 3, 64, 64)).astype(np.float32))
    model(x)  # updates BN running stats
    for t in model.param_store().values():
        t.data[...] += rng.standard_normal(t.shape).astype(np.float32) * 0.01
    model.eval()
    return model, x


def test_checkpoint_roundtrip_bit_exact(tmp_path, trained_like_model):
    model, x = trained_like_model
    p1 = save_checkpoint(model, tmp_path / "a.pdet", meta={"epoch": 3})
    loaded = load_checkpoint(p1)
    a, b = model.state_dict(), loaded.state_dict()
    assert list(a) == list(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert loaded.config_dict() == model.config_dict()
    assert loaded.checkpoint_meta == {"epoch": 3}
    with no_grad():
        for o1, o2 in zip(model(x), loaded(x)):
            assert np.array_equal(o1.data, o2.data)
    p2 = save_checkpoint(loaded, tmp_path / "b.pdet")
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_corruption_is_format_error(tmp_path, trained_like_model):
    model, _ = trained_like_model
    good = save_checkpoint(model, tmp_path / "a.pdet").read_bytes()
    rng = np.random.default_rng(0)
    cases = [good[:-100], good[:10], b"XDET" + good[4:], b""]
    for pos in list(rng.integers(0, len(good), 40)) + [4, 8, 20, 30]:
        bad = bytearray(good)
        bad[pos] ^= 0xFF
        cases.append(bytes(bad))
    version = bytearray(good)
    version[4:8] = struct.pack("<I", 2)
    cases.append(bytes(version))
    for i, buf in enumerate(cases):
        path = tmp_path / f"bad{i}.pdet"
        path.write_bytes(buf)
        with pytest.raises(FormatError):
            load_checkpoint(path)


def test_checkpoint_overlapping_offsets(trained_like_model):
    import json
    import zlib
    from plantdet.checkpoint import encode_checkpoint

    buf = encode_checkpoint({"a": np.ones(2), "b": np.ones(3)}, {})
    head_len = struct.unpack_from("<Q", buf, 8)[0]
    header = json.loads(buf[16:16 + head_len])
    header["b"]["offset"] = 4
    new_head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    assert len(new_head) == head_len
    body = buf[:16] + new_head + buf[16 + head_len:-4]
    with pytest.raises(FormatError, match="overlaps"):
        decode_checkpoint(body + struct.pack("<I", zlib.crc32(body)))
