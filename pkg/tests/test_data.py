import numpy as np
import pytest
import torch

from derma.data import (FLIP_PROB, HAM10000_SITES, IMAGENET_MEAN, BalancePolicy, Manifest, Record, apply_mask,
                        augment, augment_batch, AugmentParams, balance_manifest, encode_metadata, load_data,
                        load_manifest, make_batch, preprocess, sample_augment_params, split_train_val,
                        write_manifest)
from derma.imageio import write_image

HEADER = "image,mask,label,age,sex,site\n"


def _corpus(tmp_path, n=3):
    rng = np.random.default_rng(0)
    (tmp_path / "img").mkdir()
    rows = []
    for i in range(n):
        write_image(tmp_path / "img" / f"{i}.ppm", rng.integers(0, 256, (8, 8, 3), dtype=np.uint8))
        write_image(tmp_path / "img" / f"{i}.pgm", (rng.random((8, 8)) > 0.5).astype(np.uint8) * 255)
        rows.append(f"img/{i}.ppm,img/{i}.pgm,{'ab'[i % 2]},{40 + i},{'male' if i else ''},back\n")
    (tmp_path / "m.csv").write_text(HEADER + "".join(rows))
    return tmp_path / "m.csv"


def test_manifest_fixture_round_trip(tmp_path):
    path = _corpus(tmp_path)
    m = load_manifest(path)
    assert len(m) == 3 and m.classes == ["a", "b"]
    assert m.records[1].age == 41.0 and m.records[1].sex == "male" and m.records[1].site == "back"
    assert m.records[0].sex is None
    assert m.records[0].field_available == (True, False, True)
    write_manifest(tmp_path / "copy.csv", m)
    again = load_manifest(tmp_path / "copy.csv")
    assert again.records == m.records


def test_empty_manifest(tmp_path):
    (tmp_path / "m.csv").write_text(HEADER)
    assert len(load_manifest(tmp_path / "m.csv")) == 0


def test_blank_age_unavailable(tmp_path):
    (tmp_path / "m.csv").write_text(HEADER + "x.ppm,,a,,female,face\n")
    rec = load_manifest(tmp_path / "m.csv", check_files=False).records[0]
    assert rec.age is None
    mv = encode_metadata(rec)
    assert mv.features[0] == 0.0 and mv.alpha == 1.0


@pytest.mark.parametrize("body,match", [
    ("x.ppm,,a,,female\n", "line 2|:2:"),
    ("x.ppm,,a,old,female,face\n", "not a number"),
    ("x.ppm,,a,3,robot,face\n", "sex must be"),
    (",,a,3,male,face\n", "required"),
])
def test_malformed_rows_rejected_with_line(tmp_path, body, match):
    (tmp_path / "m.csv").write_text(HEADER + body)
    with pytest.raises(ValueError, match=match):
        load_manifest(tmp_path / "m.csv", check_files=False)


def test_bad_header_and_missing_file(tmp_path):
    (tmp_path / "m.csv").write_text("a,b\n")
    with pytest.raises(ValueError, match="header"):
        load_manifest(tmp_path / "m.csv")
    (tmp_path / "m.csv").write_text(HEADER + "nope.ppm,,a,,,\n")
    with pytest.raises(FileNotFoundError, match="nope.ppm"):
        load_manifest(tmp_path / "m.csv")


def test_unknown_label_rejected(tmp_path):
    (tmp_path / "m.csv").write_text(HEADER + "x.ppm,,z,,,\n")
    with pytest.raises(ValueError, match="not in the configured classes"):
        load_manifest(tmp_path / "m.csv", classes=["a"], check_files=False)


def test_preprocess_white_and_mean():
    white = np.full((10, 12, 3), 255, dtype=np.uint8)
    out = preprocess(white, side=16)
    assert out.shape == (3, 16, 16)
    want = [2.2489, 2.4286, 2.6400]
    for c in range(3):
        assert out[c].mean().item() == pytest.approx(want[c], abs=1e-4)
    mean_img = np.zeros((4, 4, 3), dtype=np.float32)
    # a float image exactly at the means is not 8-bit; check the normalisation itself instead
    from derma.data import normalize
    assert torch.allclose(normalize(torch.tensor(IMAGENET_MEAN).view(3, 1, 1).expand(3, 4, 4)),
                          torch.zeros(3, 4, 4), atol=1e-7)
    with pytest.raises(ValueError):
        preprocess(mean_img)


def test_preprocess_rejects_grey():
    with pytest.raises(ValueError, match="RGB"):
        preprocess(np.zeros((8, 8), dtype=np.uint8))


def test_apply_mask_examples():
    img = torch.rand(3, 4, 4)
    assert torch.equal(apply_mask(img, torch.ones(4, 4)), img)
    assert torch.all(apply_mask(img, torch.zeros(4, 4)) == 0)
    checker = (torch.arange(4)[:, None] + torch.arange(4)[None, :]) % 2
    out = apply_mask(img, checker)
    assert torch.equal(out[:, checker == 1], img[:, checker == 1])
    assert torch.all(out[:, checker == 0] == 0)
    u8 = np.full((4, 4, 3), 200, dtype=np.uint8)
    assert apply_mask(u8, checker.numpy())[0, 0].tolist() == [0, 0, 0]
    with pytest.raises(ValueError):
        apply_mask(img, torch.ones(3, 3))


def test_augment_identity_and_double_flip():
    img = torch.rand(1, 3, 8, 8)
    mask = (torch.rand(1, 1, 8, 8) > 0.5).float()
    same, m = augment_batch(img, mask, [AugmentParams(False, 0.0)])
    assert torch.equal(same, img) and torch.equal(m, mask)
    once, _ = augment_batch(img, None, [AugmentParams(True, 0.0)])
    twice, _ = augment_batch(once, None, [AugmentParams(True, 0.0)])
    assert torch.equal(twice, img)
    assert torch.equal(once, img.flip(-1))


def test_augment_shares_transform_and_keeps_mask_binary():
    img = torch.zeros(3, 16, 16)
    mask = torch.zeros(16, 16)
    mask[4:9, 2:7] = 1
    img[:, 4:9, 2:7] = 1
    out, m, params = augment(img, mask, np.random.default_rng(3))
    assert set(m.unique().tolist()) <= {0.0, 1.0}
    assert abs(params.angle) <= 15
    # the rotated image is bright where the rotated mask is set
    assert out[0][m > 0].mean() > 0.8


def test_augment_statistics():
    rng = np.random.default_rng(11)
    draws = [sample_augment_params(rng) for _ in range(10_000)]
    flips = np.mean([d.flip for d in draws])
    angles = np.array([d.angle for d in draws])
    assert abs(flips - FLIP_PROB) <= 0.03
    assert angles.min() >= -15 and angles.max() <= 15


def test_metadata_rules():
    missing = encode_metadata(Record("x", None, "a"))
    assert not missing.features.any() and missing.alpha == 0.0
    assert encode_metadata(Record("x", None, "a", age=50)).features[0] == pytest.approx(0.5)
    assert encode_metadata(Record("x", None, "a", age=130)).features[0] == 1.0
    with pytest.warns(UserWarning, match="unknown site"):
        mv = encode_metadata(Record("x", None, "a", site="elbow"))
    assert mv.features[4 + HAM10000_SITES.index("unknown")] == 1.0


def _manifest(counts):
    records, classes = [], sorted(counts)
    for c in classes:
        records += [Record(f"{c}{i}", None, c) for i in range(counts[c])]
    return Manifest(records, classes)


def _effective(manifest, entries):
    out = {c: 0 for c in manifest.classes}
    for e in entries:
        out[manifest.records[e.index].label] += 1
    return out


def test_balance_expands_small_class():
    m = _manifest({"A": 100, "B": 10})
    entries, target = balance_manifest(m, BalancePolicy(target=100))
    assert target == 100
    assert _effective(m, entries) == {"A": 100, "B": 100}
    b_idx = [e.index for e in entries if m.records[e.index].label == "B"]
    assert np.bincount(b_idx)[100:].tolist() == [10] * 10


def test_balance_subsamples_majority():
    m = _manifest({"A": 1000, "B": 100, "C": 100})
    entries, target = balance_manifest(m)
    assert target == 100
    assert _effective(m, entries) == {"A": 200, "B": 100, "C": 100}
    assert len({e.index for e in entries}) == 400


def test_balance_uniform_unchanged_and_seeds_unique():
    m = _manifest({"A": 5, "B": 5})
    entries, _ = balance_manifest(m)
    assert sorted(e.index for e in entries) == list(range(10))
    m = _manifest({"A": 50, "B": 3, "C": 20})
    entries, _ = balance_manifest(m)
    assert len({(e.index, e.aug_seed) for e in entries}) == len(entries)
    assert len({e.aug_seed for e in entries}) == len(entries)


def test_balance_k_max_limits_expansion():
    m = _manifest({"A": 100, "B": 2})
    eff = _effective(m, balance_manifest(m, BalancePolicy(target=100))[0])
    assert eff["B"] == 20


def test_balance_rejects_empty_class():
    m = Manifest([Record("x", None, "A")], ["A", "B"])
    with pytest.raises(ValueError, match="without records"):
        balance_manifest(m)


def test_split_per_class_and_partition():
    m = _manifest({"A": 10, "B": 10, "C": 10})
    train, val = split_train_val(m, 0.8, np.random.default_rng(1))
    labels = m.labels()
    assert np.bincount(labels[train]).tolist() == [8, 8, 8]
    assert np.bincount(labels[val]).tolist() == [2, 2, 2]
    assert set(train).isdisjoint(val) and sorted(train + val) == list(range(30))
    assert (train, val) == split_train_val(m, 0.8, np.random.default_rng(1))


def test_split_singleton_class_warns():
    m = _manifest({"A": 5, "B": 1})
    with pytest.warns(UserWarning, match="kept in the training"):
        train, val = split_train_val(m)
    assert 5 in train
    with pytest.raises(ValueError):
        split_train_val(m, 1.0)


def test_load_data_order_independent_of_workers(tmp_path, monkeypatch):
    m = load_manifest(_corpus(tmp_path, n=6))
    one = load_data(m, side=8, workers=1)
    monkeypatch.setenv("DERMA_NUM_WORKERS", "3")
    many = load_data(m, side=8)
    assert np.array_equal(one.images, many.images) and np.array_equal(one.masks, many.masks)
    assert one.labels.tolist() == [0, 1, 0, 1, 0, 1]
    small = load_data(m, side=4)
    assert small.images.shape == (6, 4, 4, 3) and set(np.unique(small.masks)) <= {0, 1}


def test_make_batch_segmented_zero_outside_mask(tmp_path):
    m = load_manifest(_corpus(tmp_path, n=4))
    data = load_data(m, side=8)
    batch = make_batch(data, [0, 2])
    outside = batch.masks[:, 0] == 0
    zero_level = (0 - torch.tensor(IMAGENET_MEAN)) / torch.tensor((0.229, 0.224, 0.225))
    for c in range(3):
        vals = batch.segmented[:, c][outside]
        assert torch.allclose(vals, zero_level[c].expand_as(vals))
    # no augmentation means byte-identical batches
    assert torch.equal(batch.original, make_batch(data, [0, 2]).original)
    aug = make_batch(data, [0, 2], aug_seeds=[5, 6])
    assert aug.original.shape == batch.original.shape
