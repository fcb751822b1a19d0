import shutil

import numpy as np
import pytest

from itasim import tensorio
from itasim.attention import ShapeError
from itasim.config import AttentionDims
from itasim.harness import random_workload
from itasim.manifest import ManifestError, load_manifest, write_manifest
from itasim.quant import QuantizedMatrix


@pytest.fixture
def written(tmp_path):
    dims = AttentionDims(12, 10, 6, 2)
    x, w = random_workload(dims, seed=4)
    path = write_manifest(tmp_path, x, w, dims, seed=4)
    return path, x, w, dims


def test_round_trip(written):
    path, x, w, dims = written
    x2, w2, dims2, att = load_manifest(path)
    assert dims2 == dims and x2 == x and att["seed"] == "4"
    assert w2.logit_scale == w.logit_scale
    assert w2.out_requant == w.out_requant and w2.wo == w.wo
    assert np.array_equal(w2.bo, w.bo)
    for a, b in zip(w.heads, w2.heads):
        assert a.requant == b.requant
        assert a.wq == b.wq and a.wk == b.wk and a.wv == b.wv
        assert np.array_equal(a.bv, b.bv)


def test_committed_fixture_loads(fixtures_dir):
    x, w, dims, _ = load_manifest(fixtures_dir / "s128_e192_p64_h3" / "manifest.ini")
    assert dims == AttentionDims(128, 192, 64, 3) and len(w.heads) == 3


def edit(path, old, new):
    path.write_text(path.read_text().replace(old, new))


def test_unknown_key(written):
    path = written[0]
    edit(path, "[output]", "[output]\ncolour = red")
    with pytest.raises(ManifestError, match="colour"):
        load_manifest(path)


def test_missing_key(written):
    path = written[0]
    edit(path, "requant_av", "ignored_av")
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_extra_head_section(written):
    path = written[0]
    path.write_text(path.read_text() + "\n[head2]\n")
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_bad_requant(written):
    path = written[0]
    text = path.read_text()
    line = next(l for l in text.splitlines() if l.startswith("requant_q"))
    path.write_text(text.replace(line, "requant_q = 300 4 0.1"))
    with pytest.raises(ManifestError, match="requant_q"):
        load_manifest(path)


def test_shape_mismatch_names_tensor(written):
    path = written[0]
    tensorio.save_quantized(path.parent / "head1_wv.itaq", QuantizedMatrix(np.zeros((10, 5), int), 1.0))
    with pytest.raises(ShapeError) as err:
        load_manifest(path)
    assert err.value.tensor == "head1.wv"


def test_missing_tensor_file(written):
    path = written[0]
    (path.parent / "wo.itaq").unlink()
    with pytest.raises(FileNotFoundError, match="output.wo"):
        load_manifest(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "none.ini")


def test_relative_paths(written, tmp_path):
    path = written[0]
    moved = shutil.copytree(path.parent, tmp_path / "moved")
    assert load_manifest(moved / path.name)[2] == written[3]
