import itertools

import numpy as np
import pytest
from scipy import stats

from larvseg.config import RunConfig
from larvseg.errors import ContractError, FormatError, GenerationError
from larvseg.evaluation import ConfusionMatrix, miou
from larvseg.synthdata import (
    DatasetManifest,
    SynthSample,
    base_ids,
    gen_multilabel_sample,
    gen_seg_sample,
    gen_singlelabel_sample,
    generate,
    make_categories,
    novel_ids,
    partner_id,
    payload_checksum,
    read_dataset,
    stuff_id,
    write_dataset,
)


@pytest.fixture(scope="module")
def specs():
    return make_categories(12, 8, 5 / 12, seed=3)


@pytest.fixture(scope="module")
def small_cfg():
    return RunConfig(n_seg=20, n_multilabel=20, n_singlelabel=25, n_eval=10)


def test_category_split_counts():
    cats = make_categories(10, 8, 0.5, seed=0)
    assert [c.id for c in cats] == list(range(10))
    assert len(base_ids(cats)) == 5 and len(novel_ids(cats)) == 5
    assert set(base_ids(cats)).isdisjoint(novel_ids(cats))


def test_categories_deterministic():
    a = make_categories(12, 8, 0.4, seed=11)
    b = make_categories(12, 8, 0.4, seed=11)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.mu, y.mu)
        assert x.role == y.role
    c = make_categories(12, 8, 0.4, seed=12)
    assert any(not np.array_equal(x.mu, y.mu) for x, y in zip(a, c))


def test_categories_separable_exhaustive():
    cats = make_categories(12, 8, 0.5, seed=5, sigma=0.1)
    dists = [np.linalg.norm(a.mu - b.mu) for a, b in itertools.combinations(cats, 2)]
    assert min(dists) >= 2 * 0.1


@pytest.mark.parametrize("kwargs,err", [
    (dict(C=3, F=8, novel_fraction=0.5), ContractError),
    (dict(C=12, F=8, novel_fraction=1.0), ContractError),
    (dict(C=20, F=8, novel_fraction=0.5), GenerationError),
])
def test_category_errors(kwargs, err):
    with pytest.raises(err):
        make_categories(seed=0, **kwargs)


def test_sigma_too_large():
    with pytest.raises(GenerationError):
        make_categories(12, 8, 0.5, seed=0, sigma=0.9)


def test_seg_single_region_is_constant(specs):
    s = gen_seg_sample(specs, 16, 16, (1, 1), seed=(0, 1))
    assert len(np.unique(s.mask)) == 1


def test_seg_masks_only_base(specs):
    base = set(base_ids(specs))
    for i in range(50):
        s = gen_seg_sample(specs, 16, 16, (2, 6), seed=(0, i))
        assert set(np.unique(s.mask)) <= base
        assert s.labels is None


def test_seg_region_means_converge(specs):
    s = gen_seg_sample(specs, 64, 64, (2, 3), seed=(9, 9))
    for c in np.unique(s.mask):
        px = s.image[s.mask == c]
        bound = 3 * specs[c].sigma / np.sqrt(len(px))
        assert np.all(np.abs(px.mean(axis=0) - specs[c].mu) <= bound)


def test_multilabel_labels_match_hidden_mask(specs):
    novel = set(novel_ids(specs))
    for i in range(50):
        s = gen_multilabel_sample(specs, 16, 16, (2, 6), seed=(1, i))
        assert s.mask is None
        assert s.labels == frozenset(np.unique(s.hidden_mask).tolist())
        assert s.labels & novel


def test_multilabel_hidden_mask_scores_perfectly(specs):
    cm = ConfusionMatrix(12)
    for i in range(10):
        s = gen_multilabel_sample(specs, 16, 16, (2, 6), seed=(2, i))
        cm.accumulate(s.hidden_mask, s.hidden_mask)
    rep = miou(cm, base_ids(specs), novel_ids(specs))
    assert rep.all == rep.base == rep.novel == 1.0


def test_cooccurrence_brings_partner(specs):
    hits = 0
    for i in range(200):
        s = gen_multilabel_sample(specs, 16, 16, (2, 6), seed=(3, i), cooccur=1.0)
        hits += any(partner_id(specs, c) in s.labels for c in s.labels & set(novel_ids(specs)))
    assert hits == 200


def test_singlelabel_contract(specs):
    for i in range(50):
        s = gen_singlelabel_sample(specs, 16, 16, seed=(4, i))
        (fg,) = s.labels
        assert fg in novel_ids(specs)
        frac = (s.hidden_mask == fg).mean()
        assert 0.40 <= frac <= 0.70
        assert set(np.unique(s.hidden_mask)) == {fg, stuff_id(specs)}


def test_singlelabel_uniform_chi_square(specs):
    novel = novel_ids(specs)
    draws = [next(iter(gen_singlelabel_sample(specs, 8, 8, seed=(5, i)).labels)) for i in range(1000)]
    counts = [draws.count(c) for c in novel]
    assert stats.chisquare(counts).pvalue > 0.001


def test_sample_kind_contracts():
    img = np.zeros((2, 2, 1))
    with pytest.raises(ContractError):
        SynthSample(image=img, kind="seg")
    with pytest.raises(ContractError):
        SynthSample(image=img, kind="singlelabel", labels=frozenset([1, 2]))
    with pytest.raises(ContractError):
        SynthSample(image=img, kind="multilabel", labels=frozenset([1]), mask=np.zeros((2, 2)))


def test_dataset_invariants(small_cfg):
    ds = generate(DatasetManifest.from_config(small_cfg))
    novel = set(ds.novel_ids)
    assert not novel & set(np.unique(ds.masks["seg"]).tolist())
    fg = ds.labels["singlelabel"].sum(axis=0)[ds.novel_ids]
    assert fg.max() / fg.min() <= 1.2
    assert ds.labels["singlelabel"].sum(axis=1).tolist() == [1] * small_cfg.n_singlelabel


def test_generation_is_pure(small_cfg):
    a = generate(DatasetManifest.from_config(small_cfg))
    b = generate(DatasetManifest.from_config(small_cfg))
    for kind in a.images:
        np.testing.assert_array_equal(a.images[kind], b.images[kind])
        np.testing.assert_array_equal(a.masks[kind], b.masks[kind])


def test_write_read_roundtrip(tmp_path, small_cfg):
    ds = generate(DatasetManifest.from_config(small_cfg))
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path, unseal=True)
    for kind in ds.images:
        np.testing.assert_array_equal(back.images[kind], ds.images[kind])
        np.testing.assert_array_equal(back.masks[kind], ds.masks[kind])
        np.testing.assert_array_equal(back.labels[kind], ds.labels[kind])
    assert back.sample("singlelabel", 3).labels == ds.sample("singlelabel", 3).labels


def test_sealed_masks_hidden_by_default(tmp_path, small_cfg):
    write_dataset(generate(DatasetManifest.from_config(small_cfg)), tmp_path)
    ds = read_dataset(tmp_path)
    assert set(ds.masks) == {"seg"}
    assert (tmp_path / "sealed" / "multilabel_masks.ltns").exists()


def test_truncated_file_is_format_error(tmp_path, small_cfg):
    write_dataset(generate(DatasetManifest.from_config(small_cfg)), tmp_path)
    path = tmp_path / "seg_images.ltns"
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(FormatError):
        read_dataset(tmp_path, verify=False)
    with pytest.raises(FormatError):
        read_dataset(tmp_path)


def test_seed_changes_checksum(tmp_path, small_cfg):
    write_dataset(generate(DatasetManifest.from_config(small_cfg)), tmp_path / "a")
    write_dataset(generate(DatasetManifest.from_config(small_cfg)), tmp_path / "b")
    write_dataset(generate(DatasetManifest.from_config(small_cfg.replace(seed=1))), tmp_path / "c")
    assert payload_checksum(tmp_path / "a") == payload_checksum(tmp_path / "b")
    assert payload_checksum(tmp_path / "a") != payload_checksum(tmp_path / "c")


def test_manifest_roundtrip(small_cfg):
    m = generate(DatasetManifest.from_config(small_cfg)).manifest
    assert DatasetManifest.loads(m.dumps()) == m
    with pytest.raises(FormatError):
        DatasetManifest.loads("seed=1\n")
