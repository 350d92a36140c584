"""End-to-end smoke test of the `angie` extension module on a tiny desk run."""

import math
import pathlib
import sys
import tempfile

import angie

TINY = {
    "corpus.classes": "2",
    "corpus.clips_per_class": "5",
    "vq.steps": "5",
    "gpt.steps": "2",
    "gpt.layers": "1",
    "gpt.channels": "32",
    "refine.steps": "2",
    "features.steps": "2",
}


def check_geometry():
    l = angie.cholesky([[4.0, 2.0], [2.0, 5.0]])
    assert l == (2.0, 1.0, 2.0), l
    assert angie.covariance(l) == [[4.0, 2.0], [2.0, 5.0]]
    a = angie.affine([[3.0, 1.0], [1.0, 2.0]])
    aat = [[sum(a[i][k] * a[j][k] for k in range(2)) for j in range(2)] for i in range(2)]
    assert all(abs(aat[i][j] - [[3.0, 1.0], [1.0, 2.0]][i][j]) < 1e-12 for i in range(2) for j in range(2))
    try:
        angie.cholesky([[1.0, 2.0], [2.0, 1.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("indefinite matrix accepted")
    assert abs(angie.beat_consistency([1.0], [1.1]) - math.exp(-0.5)) < 1e-12


def run_pipeline(work: pathlib.Path):
    p = angie.Pipeline(str(work), preset="desk", seed=3, overrides=TINY)
    try:
        p.train_vq()
    except angie.PrerequisiteError:
        pass
    else:
        raise AssertionError("train_vq ran without a corpus")
    p.make_corpus()
    print("vq", p.train_vq())
    print("gpt", p.train_gpt())
    print("refine", p.train_refine())

    clips = pathlib.Path(p.corpus_dir) / "clips"
    first = sorted(clips.glob("*.motion"))[0]
    gen = work / "gen"
    gen.mkdir()
    out = gen / first.name
    g = p.generate(str(first.with_suffix(".wav")), str(first), str(out), frames=96)
    assert g["refined"] and len(g["rows"]) == 96 and g["regions"] == 4, g.keys()
    try:
        p.generate(str(first.with_suffix(".wav")), str(first), str(out), frames=96)
    except FileExistsError:
        pass
    else:
        raise AssertionError("overwrote without force")
    p.generate(str(first.with_suffix(".wav")), str(first), str(gen / "b.motion"), frames=96, refine=False)

    seq = angie.read_motion(str(out))
    assert seq["rows"] == g["rows"]
    angie.write_motion(str(work / "copy.motion"), seq["regions"], seq["fps"], seq["rows"])

    report = p.eval(str(gen), str(clips))
    assert report["config_digest"] == p.digest and report["fgd"] >= 0.0, report
    print("eval", report)
    inspected = p.inspect_codebook(0, str(first), codes=4)
    assert len(inspected["rows"]) == 32


def main():
    check_geometry()
    with tempfile.TemporaryDirectory() as tmp:
        run_pipeline(pathlib.Path(tmp))
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
