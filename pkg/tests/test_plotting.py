from refusal_geometry import plotting

PNG = b"\x89PNG"


def test_every_figure_writes_png(tmp_path):
    paths = [
        plotting.plot_scaling_curve([0, 1, 2], [0.0, 0.5, 1.0], tmp_path / "s.png"),
        plotting.plot_cosine_profiles({"a": [0.1, 0.2], "b": [0.0, -0.1]}, tmp_path / "p.png"),
        plotting.plot_best_of_n({"cone": [0.2, 0.5, 0.9]}, tmp_path / "b.png"),
        plotting.plot_cone_asr([0.5, 0.9, 1.0], 0.1, tmp_path / "c.png"),
        plotting.plot_loss_history([{"step": 0, "loss": 2.0}, {"step": 1, "loss": 1.0}], tmp_path / "l.png"),
    ]
    for p in paths:
        assert p.read_bytes().startswith(PNG)


def test_bytes_reproducible(tmp_path):
    hist = [{"step": s, "total": 1.0 / (s + 1), "ablation": 0.5, "retain": 0.1} for s in range(5)]
    a = plotting.plot_loss_history(hist, tmp_path / "a.png").read_bytes()
    b = plotting.plot_loss_history(hist, tmp_path / "b.png").read_bytes()
    assert a == b
    assert b"matplotlib" not in a
