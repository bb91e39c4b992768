import csv
import json

import numpy as np
import pytest

from spikemap.cli import main
from spikemap.modelio import load_model, load_scaled, load_snn, save_model


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """One generated model with converted artifacts, shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-model", "--kind", "mlp", "--seed", "0",
                 "--outdir", str(root), "--n-calib", "128", "--n-eval", "150"]) == 0
    assert main(["convert", "--model", str(root / "model"),
                 "--calib", str(root / "calib"), "--outdir", str(root)]) == 0
    return root


def args_for(root, sub, outdir, extra=()):
    return [sub,
            "--model", str(root / "model"), "--scaled", str(root / "scaled"),
            "--snn", str(root / "snn"), "--data", str(root / "eval"),
            "--outdir", str(outdir), *extra]


def test_convert_artifacts_load_back(workdir):
    load_model(str(workdir / "model.json"), str(workdir / "model.bin"))
    scaled = load_scaled(str(workdir / "scaled.json"), str(workdir / "scaled.bin"))
    snn = load_snn(str(workdir / "snn.json"), str(workdir / "snn.bin"))
    assert scaled.layer_max is not None
    assert snn.variant == "fixed_alpha"
    assert (workdir / "convert_summary.txt").exists()


def test_verify_passes_and_reports(workdir, tmp_path):
    assert main(args_for(workdir, "verify", tmp_path)) == 0
    rows = list(csv.DictReader((tmp_path / "agreement.csv").open()))
    assert float(rows[0]["agreement_pct"]) == 100.0
    assert rows[0]["n_samples"] == "150"


def test_verify_detects_corruption(workdir, tmp_path):
    net = load_model(str(workdir / "model.json"), str(workdir / "model.bin"))
    net.layers[0].weights = net.layers[0].weights + 0.4
    broken = tmp_path / "broken"
    broken.mkdir()
    save_model(net, str(broken / "model.json"), str(broken / "model.bin"))
    code = main(["verify", "--model", str(broken / "model"),
                 "--scaled", str(workdir / "scaled"), "--snn", str(workdir / "snn"),
                 "--data", str(workdir / "eval"), "--outdir", str(tmp_path)])
    assert code == 1


def test_missing_file_is_data_error(workdir, tmp_path):
    code = main(["verify", "--model", str(tmp_path / "nope"),
                 "--scaled", str(workdir / "scaled"), "--snn", str(workdir / "snn"),
                 "--data", str(workdir / "eval"), "--outdir", str(tmp_path)])
    assert code == 3


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--which", "bogus"])
    assert exc.value.code == 2


def test_invalid_delta_rejected(workdir, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["convert", "--model", str(workdir / "model"),
              "--calib", str(workdir / "calib"), "--outdir", str(tmp_path),
              "--delta", "1.5"])
    assert exc.value.code == 2


def test_zeta_sweep_monotone_latency(workdir, tmp_path):
    assert main(args_for(workdir, "sweep", tmp_path,
                         ("--which", "zeta", "--values", "0.5", "0.2", "0.0"))) == 0
    rows = list(csv.DictReader((tmp_path / "sweep_zeta.csv").open()))
    lat = [float(r["t_last"]) for r in rows]
    assert lat == sorted(lat, reverse=True)


def test_jitter_sweep_has_trials_rows(workdir, tmp_path):
    assert main(args_for(workdir, "sweep", tmp_path,
                         ("--which", "jitter", "--values", "0.001", "--trials", "5"))) == 0
    rows = list(csv.DictReader((tmp_path / "sweep_jitter_trials.csv").open()))
    assert len(rows) == 5


def test_sweep_rerun_byte_identical(workdir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(args_for(workdir, "sweep", out,
                             ("--which", "jitter", "--values", "0.005",
                              "--trials", "3", "--seed", "7"))) == 0
    assert (a / "sweep_jitter_trials.csv").read_bytes() == \
        (b / "sweep_jitter_trials.csv").read_bytes()
    assert (a / "sweep_jitter.txt").read_bytes() == (b / "sweep_jitter.txt").read_bytes()


def test_trace_dump(workdir, tmp_path):
    assert main(args_for(workdir, "trace", tmp_path, ("--index", "3"))) == 0
    text = (tmp_path / "trace.txt").read_text()
    assert "layer 1 dense" in text
    assert "prediction snn" in text
    # all hidden spike times within their windows
    snn = load_snn(str(workdir / "snn.json"), str(workdir / "snn.bin"))
    windows = {k + 1: (l.t_min, l.t_max)
               for k, l in enumerate(snn.layers[:-1])}
    for line in text.splitlines():
        parts = line.split()
        if len(parts) >= 3 and parts[0].isdigit() and int(parts[0]) >= 1:
            layer, _, t = int(parts[0]), parts[1], float(parts[2])
            lo, hi = windows[layer]
            assert lo < t <= hi + 1e-12


def test_trace_all_zero_input_all_forced(workdir, tmp_path):
    import spikemap.modelio as mio
    data = mio.load_dataset(str(workdir / "eval.json"), str(workdir / "eval.bin"))
    zeroed = mio.Dataset(images=np.zeros_like(data.images[:1]))
    mio.save_dataset(zeroed, str(tmp_path / "z.json"), str(tmp_path / "z.bin"))
    assert main(["trace", "--model", str(workdir / "model"),
                 "--scaled", str(workdir / "scaled"), "--snn", str(workdir / "snn"),
                 "--data", str(tmp_path / "z"), "--outdir", str(tmp_path),
                 "--index", "0"]) == 0
    text = (tmp_path / "trace.txt").read_text()
    first_hidden = [l for l in text.splitlines() if l.startswith("  1 ")]
    # zero input leaves only bias drive; most units get forced, none fire early
    assert first_hidden
    snn = load_snn(str(workdir / "snn.json"), str(workdir / "snn.bin"))
    lay = snn.hidden_layers()[0]
    for line in first_hidden:
        t = float(line.split()[2])
        assert lay.t_min < t <= lay.t_max


def test_trace_index_out_of_range(workdir, tmp_path):
    assert main(args_for(workdir, "trace", tmp_path, ("--index", "999"))) == 3


def test_trace_histogram_reproducible(workdir, tmp_path):
    """Per-time-bin active-neuron histograms recomputed from two dumps agree."""
    def histogram(outdir):
        assert main(args_for(workdir, "trace", outdir, ("--index", "5"))) == 0
        times = []
        for line in (outdir / "trace.txt").read_text().splitlines():
            parts = line.split()
            if len(parts) >= 3 and parts[0].isdigit() and int(parts[0]) >= 1 \
                    and not line.endswith("forced"):
                times.append(float(parts[2]))
        hist, _ = np.histogram(times, bins=20, range=(0.0, 10.0))
        return hist

    a = histogram(tmp_path / "h1")
    b = histogram(tmp_path / "h2")
    assert np.array_equal(a, b)
    assert a.sum() > 0


def test_config_file_precedence(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"zeta": 0.25, "outdir": str(tmp_path / "fromfile")}))
    assert main(["convert", "--config", str(cfg), "--model", str(workdir / "model"),
                 "--calib", str(workdir / "calib")]) == 0
    summary = (tmp_path / "fromfile" / "convert_summary.txt").read_text()
    assert "# zeta = 0.25" in summary
    # explicit flag beats the file
    assert main(["convert", "--config", str(cfg), "--model", str(workdir / "model"),
                 "--calib", str(workdir / "calib"), "--zeta", "0.4",
                 "--outdir", str(tmp_path / "flag")]) == 0
    summary = (tmp_path / "flag" / "convert_summary.txt").read_text()
    assert "# zeta = 0.4" in summary


def test_unknown_config_key_rejected(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus_key": 1}))
    with pytest.raises(SystemExit) as exc:
        main(["convert", "--config", str(cfg), "--model", str(workdir / "model"),
              "--calib", str(workdir / "calib"), "--outdir", str(tmp_path)])
    assert exc.value.code == 2
