import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsnlab.dualreg import SubjectComponents
from rsnlab.errors import GridMismatch
from rsnlab.ica import BrainMask
from rsnlab.nifti_io import NiftiHeader
from rsnlab.represent import (
    EmptyLabel,
    EmptyToken,
    InvalidToken,
    LabelSet,
    MissingLabel,
    SplitSpec,
    TooFewSubjects,
    build_dataset,
    class_distribution,
    export_png,
    import_png,
    padded_offsets,
    parse_label,
    project_2p5d,
    read_labels_file,
    split_subjects,
    write_labels_file,
)

EXAMPLE_LABELS = [
    "DMN-PCC-MID",
    "EXECUTIVE-POSTERIOR-LEFT",
    "ATTENTION-DORSAL-IPS-MID",
    "MOTOR-VENTRAL",
    "VISUAL-LINGUAL-ANTERIOR",
    "SENSORY-DORSAL-HAND-RIGHT",
    "DMN-CINGULATE-MID",
    "SALIENCE-INSULA-POSTERIOR",
    "COGNITIVE-MFG",
    "LANG-BROCA",
]


@pytest.mark.parametrize("raw", EXAMPLE_LABELS)
def test_example_labels_round_trip(raw):
    lab = parse_label(raw)
    assert "-".join(lab.tokens) == raw
    assert lab.raw == raw


def test_label_tokens():
    assert parse_label("DMN-PCC-MID").tokens == ("DMN", "PCC", "MID")
    assert parse_label("LANG-BROCA").tokens == ("LANG", "BROCA")
    assert parse_label("NOISE").tokens == ("NOISE",)
    assert parse_label("lang-broca").raw == "LANG-BROCA"
    assert parse_label("DMN-PCC-MID").network == "DMN"


@pytest.mark.parametrize("raw,err", [("A--B", EmptyToken), ("", EmptyLabel), ("   ", EmptyLabel), ("-A", EmptyToken), ("A-", EmptyToken), ("A B", InvalidToken), ("A_B", InvalidToken)])
def test_malformed_labels(raw, err):
    with pytest.raises(err):
        parse_label(raw)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789", min_size=1, max_size=8), min_size=1, max_size=5))
def test_label_round_trip_property(tokens):
    raw = "-".join(tokens)
    assert parse_label(raw).raw == raw
    assert parse_label(raw).tokens == tuple(tokens)


def test_labelset_reserved_and_stable(tmp_path):
    ls = LabelSet(["LANG-BROCA", "dmn-pcc-mid", "LANG-BROCA"])
    assert ls.labels == ["DMN-PCC-MID", "LANG-BROCA", "NOISE", "UNKNOWN"]
    ls.save(tmp_path / "ls.json")
    back = LabelSet.load(tmp_path / "ls.json")
    assert back == ls
    assert all(back.index_of(l) == i for i, l in enumerate(ls.labels))


def test_labels_file_round_trip(tmp_path):
    labels = {0: "DMN-PCC-MID", 1: "NOISE", 3: "LANG-BROCA"}
    write_labels_file(tmp_path / "l.tsv", labels)
    assert read_labels_file(tmp_path / "l.tsv") == labels


def test_projection_side_for_template_grid():
    img = project_2p5d(np.random.default_rng(0).random((45, 54, 45)))
    assert img.side == 54
    assert img.pixels.shape == (54, 54, 3) and img.pixels.dtype == np.uint8
    # axial 45x54 sits in rows 4..48 of the red channel; padding stays 0
    assert not img.red[:4].any() and not img.red[49:].any()
    assert img.red[4:49].any()


def test_zero_volume_all_black():
    img = project_2p5d(np.zeros((5, 6, 7)))
    assert not img.pixels.any()


@pytest.mark.parametrize("voxel", [(0, 0, 0), (10, 20, 30), (44, 53, 44), (7, 3, 40)])
def test_single_voxel_projection(voxel):
    shape = (45, 54, 45)
    arr = np.zeros(shape)
    arr[voxel] = 2.5
    img = project_2p5d(arr)
    x, y, z = voxel
    off = padded_offsets(shape)
    # hand-traced: side 54, x and z padded by (54 - 45) // 2 = 4, y by 0
    assert off == {"red": (4, 0), "green": (0, 4), "blue": (4, 4)}
    expected = {0: (x + 4, y), 1: (y, z + 4), 2: (x + 4, z + 4)}
    for ch, (r, c) in expected.items():
        plane = img.pixels[..., ch]
        assert np.count_nonzero(plane == 255) == 1
        assert plane[r, c] == 255
        assert np.count_nonzero(plane) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50).filter(lambda c: c != 0))
def test_constant_shift_invariance(seed, c):
    arr = np.random.default_rng(seed).standard_normal((9, 11, 8))
    assert project_2p5d(arr).pixels.tobytes() == project_2p5d(arr + c).pixels.tobytes()


def test_png_round_trip_and_header(tmp_path):
    img = project_2p5d(np.random.default_rng(2).random((45, 54, 45)))
    export_png(img, tmp_path / "a.png")
    raw = (tmp_path / "a.png").read_bytes()
    assert raw[:8] == b"\x89PNG\r\n\x1a\n"
    width, height, depth, colour = struct.unpack(">IIBB", raw[16:26])
    assert (width, height, depth, colour) == (54, 54, 8, 2)  # 8-bit truecolour, no alpha
    assert np.array_equal(import_png(tmp_path / "a.png"), img.pixels)


def test_png_zero(tmp_path):
    export_png(project_2p5d(np.zeros((4, 4, 4))), tmp_path / "z.png")
    assert not import_png(tmp_path / "z.png").any()


def test_split_counts():
    ids = [f"s{i:03d}" for i in range(176)]
    tr, va, te = split_subjects(ids, SplitSpec(seed=3))
    assert (len(tr), len(va), len(te)) == (123, 17, 36)
    assert sorted(tr + va + te) == sorted(ids)
    assert not set(tr) & set(va) and not set(tr) & set(te) and not set(va) & set(te)
    assert tuple(map(len, split_subjects(ids[:10]))) == (7, 1, 2)
    assert tuple(map(len, split_subjects(ids[:12]))) == (8, 1, 3)


def test_split_deterministic_and_order_free():
    ids = [f"s{i}" for i in range(30)]
    assert split_subjects(ids, SplitSpec(seed=9)) == split_subjects(list(reversed(ids)), SplitSpec(seed=9))
    assert split_subjects(ids, SplitSpec(seed=9)) != split_subjects(ids, SplitSpec(seed=10))


def test_split_errors():
    with pytest.raises(TooFewSubjects):
        split_subjects(["a", "b"])
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.5, 0.5)


def _subjects(n_sub, k, dims=(45, 54, 45)):
    hdr = NiftiHeader(dims=(*dims, 1), voxel_size_mm=(4, 4, 4))
    mask = BrainMask(hdr, np.ones(dims, dtype=bool))
    rng = np.random.default_rng(0)
    subs = [SubjectComponents(f"sub-{i:02d}", rng.standard_normal((10, k)), rng.standard_normal((k, mask.n_voxels)), hdr) for i in range(n_sub)]
    return mask, subs


def test_build_dataset_flat_counts():
    mask, subs = _subjects(3, 4)
    labels = {0: "DMN-PCC-MID", 1: "NOISE", 2: "LANG-BROCA", 3: "UNKNOWN"}
    ls = LabelSet(labels.values())
    ex = build_dataset(subs, mask, labels, ls)
    assert len(ex) == 12
    assert {e.features.size for e in ex} == {45 * 54 * 45} == {109_350}
    assert ex[5].subject_id == "sub-01" and ex[5].component_index == 1
    assert ex[5].class_index == ls.index_of("NOISE")
    f = ex[0].features
    assert abs(f.mean()) < 1e-12 and abs(f.std() - 1) < 1e-12


def test_build_dataset_rgb_mode():
    mask, subs = _subjects(1, 2, dims=(6, 8, 5))
    ex = build_dataset(subs, mask, {0: "NOISE", 1: "UNKNOWN"}, LabelSet([]), mode="rgb")
    assert ex[0].features.side == 8


def test_build_dataset_errors():
    mask, subs = _subjects(1, 2, dims=(4, 4, 4))
    with pytest.raises(MissingLabel):
        build_dataset(subs, mask, {0: "NOISE"}, LabelSet([]))
    other, _ = _subjects(1, 2, dims=(4, 4, 5))
    with pytest.raises(GridMismatch):
        build_dataset(subs, other, {0: "NOISE", 1: "NOISE"}, LabelSet([]))


def test_class_distribution_equal_across_splits():
    # every subject contributes every class once
    mask, subs = _subjects(20, 3, dims=(3, 3, 3))
    labels = {0: "DMN-PCC-MID", 1: "NOISE", 2: "LANG-BROCA"}
    ls = LabelSet(labels.values())
    ex = build_dataset(subs, mask, labels, ls)
    total = class_distribution(ex, len(ls))
    for part in split_subjects([s.subject_id for s in subs]):
        sel = [e for e in ex if e.subject_id in part]
        assert np.array_equal(class_distribution(sel, len(ls)), total)
