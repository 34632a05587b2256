import json
import os
import signal
import socket
import subprocess
import sys
import time

import numpy as np
import pytest

from binsight import cli
from binsight.gateway import wire_submit
from binsight.model import ModelConfig, build_model, load_model, save_model


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    from binsight.data import synth_corpus
    d = tmp_path_factory.mktemp("corpus")
    synth_corpus(6, 2, d)
    return d / "MANIFEST.tsv"


@pytest.fixture(scope="module")
def model_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("model") / "m.bsm"
    save_model(build_model(ModelConfig(seed=4)), p)
    return p


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["summary", "--bogus"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["classify", "--model", "m", "--threshold", "1.5", "f"])
    assert e.value.code == 2


def test_summary(capsys, model_file):
    code, out, _ = run(capsys, "summary")
    assert code == 0 and out.rstrip().endswith("Non-trainable params: 0")
    assert "Total params: 4,219,779" in out
    code, out2, _ = run(capsys, "summary", "--model", model_file)
    assert code == 0 and out2 == out
    code, out, _ = run(capsys, "summary", "--mode", "entropy")
    assert "256" in out.splitlines()[4]


def test_operational_error_exit_1(capsys, tmp_path):
    code, _, err = run(capsys, "summary", "--model", tmp_path / "missing.bsm")
    assert code == 1 and err.startswith("binsight: error:") and len(err.strip().splitlines()) == 1
    (tmp_path / "junk.bsm").write_bytes(b"junk")
    code, _, err = run(capsys, "classify", "--model", tmp_path / "junk.bsm", tmp_path / "x")
    assert code == 1 and "magic" in err


def test_encode(capsys, tmp_path):
    pytest.importorskip("PIL")
    src = tmp_path / "f.bin"
    src.write_bytes(bytes(range(256)) * 16)
    for mode in ("gray", "entropy"):
        code, out, _ = run(capsys, "encode", "--mode", mode, "--side", 64, "--window", 64, src, "-o",
                           tmp_path / f"{mode}.png")
        assert code == 0 and (tmp_path / f"{mode}.png").stat().st_size > 0
    src.write_bytes(b"")
    code, _, err = run(capsys, "encode", src, "-o", tmp_path / "e.png")
    assert code == 1 and "empty" in err


def test_classify(capsys, tmp_path, model_file):
    f = tmp_path / "file.bin"
    f.write_bytes(b"\x90" * 5000)
    code, out, _ = run(capsys, "classify", "--model", model_file, f)
    assert code == 0
    (line,) = out.splitlines()
    v = json.loads(line)
    assert v["status"] == "ok" and v["source"] == str(f) and v["class"] in ("mirai", "gafgyt", "goodware")
    code, out, _ = run(capsys, "classify", "--model", model_file, f, tmp_path / "nope.bin")
    assert code == 1 and len(out.splitlines()) == 2
    assert json.loads(out.splitlines()[1])["status"].startswith("error")


def test_synth_obfuscate_train_eval(capsys, tmp_path, corpus):
    code, out, _ = run(capsys, "synth", "--n-per-class", 2, "--seed", 1, "-o", tmp_path / "s")
    assert code == 0 and (tmp_path / "s" / "MANIFEST.tsv").exists()
    code, out, _ = run(capsys, "obfuscate", "--manifest", corpus, "--seed", 2, "-o", tmp_path / "o")
    assert code == 0 and "key" in out

    args = ["train", "--manifest", corpus, "--epochs", 1, "--seed", 3]
    code, out, _ = run(capsys, *args, "-o", tmp_path / "a.bsm")
    assert code == 0 and "epoch 1" in out
    code, _, _ = run(capsys, *args, "-o", tmp_path / "b.bsm")
    assert (tmp_path / "a.bsm").read_bytes() == (tmp_path / "b.bsm").read_bytes()

    code, out, _ = run(capsys, "eval", "--model", tmp_path / "a.bsm", "--manifest", corpus, "--csv")
    assert code == 0 and out.splitlines()[0] == "class,tp,fp,fn,recall,precision,f1"
    assert len(out.splitlines()) == 5
    code, out, _ = run(capsys, "eval", "--model", tmp_path / "a.bsm", "--manifest", corpus)
    assert "accuracy" in out


def test_train_entropy_mode(capsys, tmp_path, corpus):
    code, _, _ = run(capsys, "train", "--manifest", corpus, "--mode", "entropy", "--epochs", 1,
                     "-o", tmp_path / "e.bsm")
    assert code == 0 and load_model(tmp_path / "e.bsm").config.channels == 3


def test_sweep(capsys, tmp_path, corpus):
    code, out, _ = run(capsys, "sweep", "--manifest", corpus, "--fractions", "0.3", "--seeds", "0",
                       "--modes", "gray", "--epochs", 1, "-o", tmp_path / "s.csv")
    assert code == 0 and out == (tmp_path / "s.csv").read_text()
    assert out.splitlines()[1].startswith("0.3,gray,")


def test_serve_needs_an_intake(capsys, model_file):
    code, _, err = run(capsys, "serve", "--model", model_file)
    assert code == 1 and "intake" in err


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_subprocess_signal_drains(tmp_path, model_file):
    port = free_port()
    log = tmp_path / "v.jsonl"
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    proc = subprocess.Popen([sys.executable, "-m", "binsight", "serve", "--model", str(model_file),
                             "--listen", f"127.0.0.1:{port}", "--watch", str(tmp_path / "w"),
                             "--log", str(log), "--workers", "2"], env=env,
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    try:
        deadline = time.monotonic() + 60
        while True:
            try:
                v = wire_submit(("127.0.0.1", port), b"\x01\x02" * 999, timeout=30)
                break
            except OSError:
                if time.monotonic() > deadline or proc.poll() is not None:
                    raise
                time.sleep(0.2)
        assert v.ok
        proc.send_signal(signal.SIGTERM)
        assert proc.wait(timeout=30) == 0
    finally:
        if proc.poll() is None:
            proc.kill()
    rows = [json.loads(x) for x in log.read_text().splitlines()]
    assert [r["id"] for r in rows] == [v.id]
