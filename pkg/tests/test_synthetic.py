import numpy as np

from hdesnet.model_io import index_dataset, load_labels, load_pgm16
from hdesnet.plotting import plot_bench, plot_eval
from hdesnet.synthetic import make_scene, write_dataset, write_perfect_predictions


def test_scene_properties():
    s = make_scene(np.random.default_rng(0), 48, 40)
    assert s.rgb.shape == (48, 40, 3) and s.rgb.dtype == np.uint8
    assert s.depth.shape == s.labels.shape == (48, 40)
    assert (s.depth == 0).any() and (s.depth > 0).any()
    assert s.labels.any() and set(np.unique(s.labels)) <= {0, 1}
    # depth is millimetre-quantized
    assert np.allclose(np.rint(s.depth * 1000), s.depth * 1000)
    # the person stands in front of everything else
    valid = s.depth > 0
    assert s.depth[(s.labels == 1) & valid].max() < s.depth[(s.labels == 0) & valid].min()


def test_dataset_is_seeded(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert write_dataset(a, 3, seed=4) == write_dataset(b, 3, seed=4) == ["frame_000", "frame_001", "frame_002"]
    for sub, name in (("rgb", "frame_001.ppm"), ("depth", "frame_001.pgm"), ("mask", "frame_001.pgm")):
        assert (a / sub / name).read_bytes() == (b / sub / name).read_bytes()
    assert len(index_dataset(a)) == 3


def test_perfect_predictions_copy(tmp_path):
    write_dataset(tmp_path / "d", 2, seed=1)
    write_perfect_predictions(tmp_path / "d", tmp_path / "p")
    for f in ("frame_000.pgm", "frame_001.pgm"):
        assert load_pgm16(tmp_path / "p" / "depth" / f).equal(load_pgm16(tmp_path / "d" / "depth" / f))
        assert np.array_equal(load_labels(tmp_path / "p" / "mask" / f), load_labels(tmp_path / "d" / "mask" / f))


def test_figures_written(tmp_path):
    p = plot_bench({"a": np.array([10.0, 11.0]), "b": np.array([8.0, 9.0])}, tmp_path / "b.png")
    assert p.read_bytes()[:4] == b"\x89PNG"
    p = plot_eval(["f0", "f1"], [0.1, 0.2], [1.0, 0.5], [0.5, 1.0], tmp_path / "e.png")
    assert p.read_bytes()[:4] == b"\x89PNG"
