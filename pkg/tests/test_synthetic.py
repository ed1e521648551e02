import hashlib
import os
from dataclasses import replace

import numpy as np
import pytest

from ttoreg.field import DisplacementField, smoothness, warp_mask
from ttoreg.metrics import dsc
from ttoreg.synthetic import (
    CohortSpec,
    generate_cohort,
    generate_phantom,
    generate_smooth_field,
    generate_subject,
    load_cohort,
    read_manifest,
    write_cohort,
)

SMALL = CohortSpec(n_subjects=4, n_test=2, dims=(16, 16, 16), deformation_amplitude=1.5,
                   smoothness_sigma=2.0, drift_amplitude=0.5, ood_fraction=0.5)


def tree_digest(root):
    h = hashlib.sha256()
    for dirpath, dirnames, files in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(files):
            p = os.path.join(dirpath, name)
            h.update(os.path.relpath(p, root).encode())
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def test_spec_validation_and_dict_round_trip():
    for bad in (dict(deformation_amplitude=-1), dict(smoothness_sigma=0), dict(ood_fraction=1.5),
                dict(n_test=60), dict(dims=(2, 8, 8))):
        with pytest.raises(ValueError):
            CohortSpec(**bad)
    assert CohortSpec.from_dict(SMALL.to_dict()) == SMALL


def test_default_split():
    spec = CohortSpec()
    assert spec.test_indices == list(range(40, 48)) and spec.ood_indices == [46, 47]


def test_phantom_deterministic_and_disjoint():
    a, sa = generate_phantom(SMALL, 1)
    b, sb = generate_phantom(SMALL, 1)
    assert a == b and all(sa[n] == sb[n] for n in sa.names)
    masks = [sa[n].data.astype(bool) for n in sa.names]
    assert len(masks) == SMALL.n_structures and all(m.any() for m in masks)
    total = sum(m.astype(int) for m in masks)
    assert total.max() == 1
    # organs brighter than the surrounding tissue
    body = a.data > 0.05
    assert all(a.data[m].mean() > a.data[body & (total == 0)].mean() for m in masks)


def test_phantom_without_structures():
    img, ss = generate_phantom(replace(SMALL, n_structures=0), 0)
    assert len(ss.names) == 0 and np.ptp(img.data) > 0


def test_crowded_spec_fails():
    with pytest.raises(ValueError, match="crowded"):
        generate_phantom(replace(SMALL, dims=(8, 8, 8), n_structures=30), 0, max_tries=5)


def test_field_amplitude_border_and_determinism():
    u = generate_smooth_field(SMALL, 0, 1)
    assert u.max_magnitude() == pytest.approx(SMALL.deformation_amplitude, abs=1e-4)
    v = u.vectors
    for face in (v[0], v[-1], v[:, 0], v[:, -1], v[:, :, 0], v[:, :, -1]):
        assert not face.any()
    assert generate_smooth_field(SMALL, 0, 1) == u
    assert generate_smooth_field(SMALL, 3, 1).max_magnitude() == pytest.approx(3.0, abs=1e-4)  # ood
    assert generate_smooth_field(SMALL, 0, 2).max_magnitude() == pytest.approx(0.5, abs=1e-4)
    assert not generate_smooth_field(SMALL, 0, 1, amplitude=0).vectors.any()


def test_smoothness_decreases_with_sigma():
    rough = generate_smooth_field(replace(SMALL, smoothness_sigma=1.5), 0, 1)
    smooth = generate_smooth_field(replace(SMALL, smoothness_sigma=4.0), 0, 1)
    assert smoothness(smooth) < smoothness(rough)


def test_truth_masks_follow_truth_fields():
    s = generate_subject(SMALL, 0)
    for fr in s.fractions:
        for name, mask in s.structures:
            assert dsc(warp_mask(mask, fr.field), fr.structures[name]) == 1.0


def test_zero_drift_repeats_first_field():
    s = generate_subject(replace(SMALL, drift_amplitude=0.0), 0)
    assert s.fractions[1].field == s.fractions[0].field


def test_noise_free_identity_fraction_is_planning():
    s = generate_subject(replace(SMALL, deformation_amplitude=0.0, drift_amplitude=0.0, noise_sigma=0.0), 1)
    assert s.fractions[0].image.data.tobytes() == s.planning.data.tobytes()
    assert s.fractions[0].field == DisplacementField.zeros(SMALL.shape)


def test_cohort_splits():
    subs = generate_cohort(SMALL)
    assert [s.split for s in subs] == ["train", "train", "test", "test"]
    assert [s.ood for s in subs] == [False, False, False, True]
    assert [s.id for s in subs] == ["s000", "s001", "s002", "s003"]


def test_cohort_write_is_reproducible_and_loadable(tmp_path):
    write_cohort(SMALL, tmp_path / "a")
    write_cohort(SMALL, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    spec, entries = read_manifest(tmp_path / "a")
    assert spec == SMALL and len(entries) == 4
    _, test = load_cohort(tmp_path / "a", "test")
    direct = generate_subject(SMALL, 3)
    loaded = test[1]
    assert loaded.ood and loaded.planning == direct.planning
    assert loaded.fractions[1].image == direct.fractions[1].image
    assert loaded.fractions[1].field == direct.fractions[1].field


def test_cohort_write_is_transactional(tmp_path):
    out = tmp_path / "c"
    write_cohort(SMALL, out)
    before = tree_digest(out)

    class Boom(Exception):
        pass

    class Exploding(list):
        def __getitem__(self, i):
            if i == 2:
                raise Boom()
            return super().__getitem__(i)

    with pytest.raises(Boom):
        write_cohort(SMALL, out, subjects=Exploding(generate_cohort(SMALL)))
    assert tree_digest(out) == before
    assert sorted(p.name for p in tmp_path.iterdir()) == ["c"]
