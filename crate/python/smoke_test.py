"""Smoke test for the qgca extension module.

Run after `maturin develop`, or straight after `cargo build -p qgca-python`:
the script then loads target/<profile>/libqgca.so under the name `qgca`.
"""

import importlib.machinery
import importlib.util
import math
import pathlib
import sys
import tempfile


def load_qgca():
    try:
        import qgca

        return qgca
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parents[1]
    for profile in ("release", "debug"):
        lib = root / "target" / profile / "libqgca.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("qgca", str(lib))
            spec = importlib.util.spec_from_loader("qgca", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("qgca extension not found; build it with `cargo build -p qgca-python`")


def tone(seconds, freq, rate=16000):
    return [0.3 * math.sin(2 * math.pi * freq * i / rate) for i in range(int(seconds * rate))]


def main():
    qgca = load_qgca()

    assert qgca.tokenize("The low horn, twice!") == ["the", "low", "horn", "twice"]

    frames = qgca.log_mel(tone(1.0, 440.0), 16000)
    assert len(frames) == 49 and len(frames[0]) == 64
    # resampled input lands on the same frame grid
    assert len(qgca.log_mel(tone(1.0, 440.0, 8000), 8000)) == 49

    assert qgca.binarize([0.5, 0.4, 0.9], 0.4) == [1, 0, 1]
    assert qgca.extract_segments([0, 1, 1, 0], 0.02) == [(0.02, 0.06)]
    assert qgca.labels_from_segments([(0.03, 0.05)], 4, 0.02) == [0.0, 1.0, 1.0, 0.0]
    assert qgca.match_events([(0.05, 8.0)], [(0.0, 8.59)]) == (1, 0, 0)

    model = qgca.Model.untrained(["a low horn sounds", "a sharp beep"], seed=3)
    assert model.vocab_size >= 6 and model.num_parameters > 0
    segments, scores = model.ground(tone(2.0, 140.0), 16000, "a low horn sounds", beta=1e-9)
    assert all(0.0 < z <= 1.0 for z in scores)
    assert len(segments) == 1 and segments[0][0] == 0.0
    graph_alpha, cross = model.attention(tone(1.0, 140.0), 16000, "a low horn")
    assert len(graph_alpha) == 2 and len(graph_alpha[0]) == 3
    assert len(cross) == 3 and len(cross[0]) == 49
    for row in graph_alpha[0]:
        assert abs(sum(row) - 1.0) < 1e-9

    with tempfile.TemporaryDirectory() as tmp:
        assert qgca.synth_data(tmp, pairs=10, seed=1) == (8, 1, 1)

    try:
        qgca.Model.load("/nonexistent/model.ckpt")
    except OSError:
        pass
    else:
        raise AssertionError("loading a missing checkpoint should fail")

    failed = [name for name, _, _, ok in qgca.gradcheck(0) if not ok]
    assert not failed, failed
    print("python smoke test passed")


if __name__ == "__main__":
    main()
