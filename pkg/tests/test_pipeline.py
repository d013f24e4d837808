import numpy as np
import pytest

from polyalign import net
from polyalign.dataset import LoadedImage, SceneSpec, generate_scene, load_dataset, write_scenes
from polyalign.geometry import (
    AnnotationSet,
    ConfigError,
    DisplacementField,
    Polygon,
    read_field,
    warp_annotations_forward,
)
from polyalign.metrics import distances_array, vertex_distances
from polyalign.oracle import OraclePredictor, oracle_alignment_model, zero_alignment_model, zero_predictor
from polyalign.pipeline import (
    MAX_PASS_CORRECTION_PX,
    AlignmentModel,
    RoundAborted,
    align_multiresolution,
    align_step_at_scale,
    max_vertex_movement,
    run_multiround,
)
from polyalign.raster import ImagePatch
from polyalign.training import TrainConfig, TrainingDivergence


def blank(size=64):
    return ImagePatch(np.zeros((3, size, size)))


def boxes(size=64):
    return AnnotationSet((Polygon([[10, 10], [22, 10], [22, 20], [10, 20]]),
                          Polygon([[35.5, 30], [50, 33], [44, 50]])), "b", (size, size))


def constant_predictor(dx, dy, only=None):
    def predict(image_s, raster_s, ann_s, factor):
        h, w = image_s.extent
        if only is not None and factor != only:
            return DisplacementField.zeros(h, w)
        return DisplacementField.constant(h, w, dx, dy)
    return predict


def test_zero_model_is_identity():
    a = boxes()
    assert align_multiresolution(zero_alignment_model(), blank(), a) == a


def test_constant_at_one_scale_subtracts_scaled_offset():
    m = AlignmentModel({f: constant_predictor(1.0, -0.5, only=4) for f in (8, 4, 2, 1)})
    out = align_multiresolution(m, blank(), boxes())
    np.testing.assert_allclose(out.all_vertices(), boxes().all_vertices() - [4.0, -2.0], atol=1e-12)


def test_pass_correction_bounded_by_sixty():
    assert MAX_PASS_CORRECTION_PX == 60
    m = AlignmentModel({f: constant_predictor(net.DISP_BOUND_PX, net.DISP_BOUND_PX) for f in (8, 4, 2, 1)})
    out = align_multiresolution(m, blank(), boxes())
    assert max_vertex_movement(boxes(), out) == pytest.approx(60.0)


def test_oracle_recovers_large_misalignment():
    truth = generate_scene(SceneSpec(128, 128, buildings=(5, 8), seed=3), "o").true_annotations
    yy, xx = np.mgrid[0:128, 0:128] / 127.0
    f = DisplacementField(np.stack([20 + 10 * np.sin(np.pi * yy), 18 + 6 * xx], axis=-1))
    noisy = warp_annotations_forward(truth, f)
    assert distances_array(vertex_distances(noisy, truth)).mean() > 20
    out = align_multiresolution(oracle_alignment_model({"o": f}), blank(128), noisy)
    assert distances_array(vertex_distances(out, truth)).mean() < 1.0


def test_oracle_output_clamped():
    f = DisplacementField.constant(64, 64, 50.0, 0.0)
    g = OraclePredictor({"b": f})(blank(8), None, boxes().scaled(1 / 8, (8, 8)), 8)
    assert np.abs(g.vectors).max() == net.DISP_BOUND_PX


def test_model_needs_all_scales():
    with pytest.raises(ConfigError):
        AlignmentModel({8: zero_predictor, 4: zero_predictor})


def test_scale_mismatch_rejected():
    m = net.init_model(net.ArchDescriptor((4, 8)), 0, scale=2)
    with pytest.raises(ConfigError):
        align_step_at_scale(m, blank(), boxes(), 4)


def test_network_step_runs_and_keeps_structure():
    m = net.init_model(net.ArchDescriptor((4, 8)), 0, scale=2)
    out = align_step_at_scale(m, blank(), boxes(), 2)
    assert out.vertex_counts == boxes().vertex_counts
    assert max_vertex_movement(boxes(), out) <= 2 * net.DISP_BOUND_PX + 1e-9


def dataset(n=2):
    rng = np.random.default_rng(0)
    out = []
    for k in range(n):
        a = AnnotationSet(tuple(Polygon(p.vertices + rng.uniform(-2, 2, 2)) for p in boxes().polygons),
                          f"i{k}", (64, 64))
        out.append(LoadedImage(f"i{k}", blank(), a, (64, 64), (0, 0)))
    return out


class RecordingTrainer:
    """Returns a model shifting by +1 px at full resolution and records its inputs."""

    def __init__(self):
        self.calls = []

    def __call__(self, scenes, round_index, seed, previous):
        self.calls.append((round_index, [a for _, a in scenes]))
        return AlignmentModel({f: constant_predictor(1.0, 0.0, only=1) for f in (8, 4, 2, 1)}, round_index), {}


@pytest.mark.parametrize("mode,expected", [("standard", [1, 1, 1]), ("AS1", [1, 2, 3]), ("AS2", [1, 2, 3])])
def test_modes(mode, expected, tmp_path):
    data = dataset()
    tr = RecordingTrainer()
    states = run_multiround(data, 3, mode, trainer=tr, out_dir=tmp_path)
    assert [s.round for s in states] == [0, 1, 2, 3]
    a0 = {d.image_id: d.annotations for d in data}
    for s, shift in zip(states[1:], expected):
        for k, a in s.annotations.items():
            np.testing.assert_allclose(a.all_vertices(), a0[k].all_vertices() - [shift, 0], atol=1e-12)
    assert len(tr.calls) == (1 if mode == "AS2" else 3)
    # training round r always sees A_{r-1}
    for r, anns in tr.calls:
        for k, a in enumerate(anns):
            assert a.polygons == states[r - 1].annotations[f"i{k}"].polygons
    audit = (tmp_path / "rounds" / "r3" / "audit.log").read_text()
    source = "A0" if mode == "standard" else "A2"
    assert all(f"input={source}" in line for line in audit.splitlines() if line.startswith("align"))
    if mode == "AS2":
        assert "reuse model=M1 round=3" in audit


def test_as1_equals_standard_for_one_round():
    s1 = run_multiround(dataset(), 1, "standard", trainer=RecordingTrainer())
    s2 = run_multiround(dataset(), 1, "AS1", trainer=RecordingTrainer())
    assert s1[1].annotations == s2[1].annotations


def test_noisier_mode_corrupts_inputs(tmp_path):
    data = dataset()
    tr = RecordingTrainer()
    states = run_multiround(data, 1, "noisier", trainer=tr, out_dir=tmp_path, seed=4)
    f = read_field(tmp_path / "noisier" / "i0.dfld")
    assert 0 < np.abs(f.vectors).max() <= 16.0
    assert states[0].annotations["i0"] != data[0].annotations
    assert tr.calls[0][1][0].polygons == states[0].annotations["i0"].polygons


def test_bad_mode_and_rounds():
    with pytest.raises(ConfigError):
        run_multiround(dataset(), 1, "AS3", trainer=RecordingTrainer())
    with pytest.raises(ConfigError):
        run_multiround(dataset(), 0, trainer=RecordingTrainer())


def test_divergence_aborts_round(tmp_path):
    def boom(scenes, r, seed, previous):
        raise TrainingDivergence("nan loss")

    with pytest.raises(RoundAborted) as exc:
        run_multiround(dataset(), 2, trainer=boom, out_dir=tmp_path)
    assert [s.round for s in exc.value.states] == [0]
    assert "aborted" in (tmp_path / "rounds" / "r1" / "audit.log").read_text()


def test_as2_writes_four_checkpoints_and_is_deterministic(tmp_path):
    scenes = [generate_scene(SceneSpec(64, 64, buildings=(2, 3), seed=k), f"s{k}") for k in range(2)]
    data = load_dataset(write_scenes(scenes, tmp_path / "data"))
    cfg = TrainConfig(steps=2, widths=(4, 8), patch_size=8, batch_size=2)
    states = run_multiround(data, 3, "AS2", cfg, out_dir=tmp_path / "a")
    ckpts = sorted(p.name for p in (tmp_path / "a").rglob("*.ckpt"))
    assert ckpts == ["r1_s1.ckpt", "r1_s2.ckpt", "r1_s4.ckpt", "r1_s8.ckpt"]
    assert [s.trained for s in states] == [False, True, False, False]
    run_multiround(data, 3, "AS2", cfg, out_dir=tmp_path / "b")
    for p in sorted((tmp_path / "a").rglob("*.json")):
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()
