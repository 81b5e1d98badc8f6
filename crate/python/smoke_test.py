"""Smoke test for the streamgraph_py extension module."""

import json
import os
import sys
import tempfile

import streamgraph_py as sg

HERE = os.path.dirname(os.path.abspath(__file__))
MODELS = os.path.join(HERE, "..", "scenarios", "models", "calibrated.toml")


def tweet(tid, user, tags=(), mentions=()):
    return json.dumps({
        "id_str": tid,
        "text": "hello",
        "user": {"id_str": user},
        "entities": {
            "hashtags": [{"text": t} for t in tags],
            "user_mentions": [{"id_str": m} for m in mentions],
        },
    })


def check_edge_table():
    lines = [tweet("1", "a", ["Vote"], ["b"]), tweet("1", "a", ["vote"], ["b"]), tweet("2", "a", ["VOTE"])]
    t = sg.create_edges(lines, sg.Mapping.tweets())
    edges = {e[:5]: e[5] for e in t.edges()}
    assert edges[("user", "a", "tweet", "1", "owner")] == 2, edges
    assert edges[("hashtag", "vote", "user", "b", "mentioned-with-ht")] == 2, edges
    assert ("hashtag", "vote") in t.nodes()
    assert t.total_count == 10, t.total_count
    assert t.n_edges < t.total_count
    parallel = sg.create_edges(lines * 50, workers=4)
    serial = sg.create_edges(lines * 50)
    assert sorted(parallel.edges()) == sorted(serial.edges())
    assert 0 < t.compression_ratio() < 1
    assert "MERGE" in t.to_cypher(3)


def check_models():
    cpu = sg.CpuModel.preset("table1g-50")
    assert (cpu.a, cpu.b, cpu.c) == (0.008, 0.0024, 5.29)
    low, high = cpu.predict(10, 20), cpu.predict(10000, 20)
    assert low < high
    buf = sg.BufferModel(k=2.0, r=1.0)
    assert abs(buf.predict(0.5, 2.0) - 5.0) < 1e-12
    try:
        sg.CpuModel.preset("missing")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")


def check_run():
    with tempfile.TemporaryDirectory() as d:
        corpus = os.path.join(d, "corpus.jsonl")
        with open(corpus, "w") as f:
            f.write("\n".join(sg.synth_corpus(2000, seed=3)) + "\n")
        cfg = os.path.join(d, "engine.xmlcfg")
        with open(cfg, "w") as f:
            f.write(f"""<engine>
  <paths input="corpus.jsonl" spill_dir="out/spill" archive_dir="out/archive" telemetry="out/telemetry.csv" model_file="{MODELS}"/>
  <schedule seed="2"><segment duration_s="120" rate="8"/><segment duration_s="60" rate="2"/></schedule>
  <controller cpu_max="50" flush_interval_s="0.5"/>
</engine>""")
        assert sg.validate_config(cfg) == []
        report = sg.run(cfg)
        total = sum(report[k] for k in ("committed", "spilled", "filtered", "skipped", "shed", "archived"))
        assert total == report["records_in"] + report["spill_initial"], report
        buf, cpu, text = sg.fit_models(os.path.join(d, "out", "telemetry.csv"), out=os.path.join(d, "m.toml"))
        loaded = sg.load_models(os.path.join(d, "m.toml"))
        assert loaded[1].a == cpu.a and loaded[0].k == buf.k
        assert "selected CPU model" in text
        bad = os.path.join(d, "bad.xmlcfg")
        with open(bad, "w") as f:
            f.write("<engine><paths/></engine>")
        assert sg.validate_config(bad)
        return report


def main():
    check_edge_table()
    check_models()
    report = check_run()
    print(f"smoke ok: {report['records_in']} records, {report['committed']} committed, "
          f"max cpu {report['max_mu']:.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
