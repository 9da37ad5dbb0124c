"""Configuration grammar, artifact files, pipeline stages, and the CLI.

Pipeline tests run on a micro problem (8x3 mesh, 9 basal dofs) so a
full stage chain stays in unit-test time; end-to-end determinism at the
shipped configurations lives in the acceptance suite.
"""

import subprocess
import sys

import numpy as np
import pytest

from iceinv import (ConfigurationError, FieldSpec, GammaLadder, RunConfig,
                    parse_config, serialize_config, with_seed, with_output,
                    Pipeline, StageError)
from iceinv import io as artio
from iceinv.cli import main as cli_main


MICRO = """\
[mesh]
nx = 8
nz = 3

[synth]
fine_factor = 2

[lcurve]
gammas = list 1.0 10.0

[gevd]
rank_max = 9
oversample = 2

[sampling]
n_samples = 50
n_dump = 2
"""

FLAT = """\
[domain]
bed = flat 0.0
surface = flat 1.0
sea_level = 1.0
water_density = 910.0

[mesh]
nx = 8
nz = 4

[synth]
beta_true = flat 0.0
"""


# -- config grammar ----------------------------------------------------

def test_defaults_are_the_desk_problem():
    cfg = RunConfig()
    assert cfg.domain.length == 100.0
    assert (cfg.mesh.nx, cfg.mesh.nz, cfg.mesh.order) == (32, 8, 2)
    assert cfg.prior.gamma == 10.0 and cfg.prior.delta == 1e-5
    assert cfg.observation.seed == 42
    assert cfg.physics_params().rho_g == pytest.approx(910.0 * 9.81 * 1e-3)
    mesh = cfg.build_mesh()
    assert (mesh.nx, mesh.nz, mesh.k) == (32, 8, 2)
    assert cfg.map_gamma() == 10.0
    assert [q.tag for q in cfg.qois] == ["flux"]


def test_shipped_configs_are_canonical():
    for name in ("configs/desk.ini", "configs/tiny.ini"):
        with open(name, "r", encoding="utf-8") as fh:
            text = fh.read()
        assert serialize_config(parse_config(text)) == text
    # the desk file is exactly the built-in defaults
    with open("configs/desk.ini", "r", encoding="utf-8") as fh:
        assert serialize_config(RunConfig()) == fh.read()


def test_field_spec_grammar():
    x = np.array([0.0, 50.0, 100.0])
    assert np.allclose(FieldSpec.parse("flat 2.5")(x, 100.0), 2.5)
    lin = FieldSpec.parse("linear 1.0 3.0")(x, 100.0)
    assert np.allclose(lin, [1.0, 2.0, 3.0])
    sin = FieldSpec.parse("sine 1.0 0.5 2.0")(x, 100.0)
    assert np.allclose(sin, 1.0 + 0.5 * np.sin(2 * np.pi * 2 * x / 100.0))
    g = FieldSpec.parse("gaussians -1.0 -3.0 60.0 12.0")
    assert np.allclose(g(x, 100.0),
                       -1.0 - 3.0 * np.exp(-(((x - 60.0) / 12.0) ** 2)))
    two = FieldSpec.parse("gaussians 0.0 1.0 20.0 5.0 2.0 80.0 5.0")
    assert two(np.array([20.0]), 100.0)[0] == pytest.approx(1.0, abs=1e-6)
    for bad in ("", "flat", "flat 1 2", "linear 1", "wedge 1 2",
                "gaussians", "gaussians 0 1 2", "flat abc"):
        with pytest.raises(ConfigurationError):
            FieldSpec.parse(bad)
    # text round-trip is exact
    for text in ("flat 2.5", "sine 0.0 0.05 2.0",
                 "gaussians -1.0 -3.0 60.0 12.0"):
        f = FieldSpec.parse(text)
        assert FieldSpec.parse(f.text()) == f


def test_gamma_ladder_grammar():
    lad = GammaLadder.parse("logspace -2.0 4.0 13")
    assert lad.values().size == 13
    assert lad.values()[0] == pytest.approx(1e-2)
    assert lad.values()[-1] == pytest.approx(1e4)
    lst = GammaLadder.parse("list 0.5 2.0")
    assert np.array_equal(lst.values(), [0.5, 2.0])
    for bad in ("", "geom 1 2 3", "logspace 1 2", "logspace 1 2 2.5",
                "list", "list abc"):
        with pytest.raises(ConfigurationError):
            GammaLadder.parse(bad)
    assert GammaLadder.parse(lad.text()) == lad


def test_unknown_sections_and_keys_error():
    with pytest.raises(ConfigurationError):
        parse_config("[weather]\nrain = 1\n")
    with pytest.raises(ConfigurationError):
        parse_config("[mesh]\nnx = 8\nny = 2\n")
    with pytest.raises(ConfigurationError):
        parse_config("[mesh]\nnx = eight\n")
    with pytest.raises(ConfigurationError):
        parse_config("[inversion]\ncontinuation = yes\n")
    with pytest.raises(ConfigurationError):
        parse_config("[domain]\nleft_bc = frozen\n")
    with pytest.raises(ConfigurationError):
        parse_config("[qoi:]\nboundary = right\n")
    with pytest.raises(ConfigurationError):
        parse_config("[qoi:flux]\nside = right\n")


def test_parse_overrides_and_none_values():
    cfg = parse_config(MICRO)
    assert (cfg.mesh.nx, cfg.mesh.nz) == (8, 3)
    assert cfg.inversion.gamma is None
    assert cfg.map_gamma() == cfg.prior.gamma
    cfg2 = parse_config("[inversion]\ngamma = 2.5\n")
    assert cfg2.map_gamma() == 2.5
    q = parse_config("[qoi:band]\nz_min = 0.25\nz_max = none\n").qois[0]
    assert q.tag == "band" and q.z_min == 0.25 and q.z_max is None
    spec = q.to_spec()
    assert spec.boundary is None          # outflow defers to the domain


def test_serialize_parse_identity():
    cfg = parse_config(MICRO)
    text = serialize_config(cfg)
    again = serialize_config(parse_config(text))
    assert again == text


def test_seed_and_output_overrides():
    cfg = parse_config(MICRO)
    cfg2 = with_seed(cfg, 7)
    assert cfg2.observation.seed == 7
    assert cfg2.observation.mode == cfg.observation.mode
    assert cfg.observation.seed == 42     # original untouched
    cfg3 = with_output(cfg, "elsewhere")
    assert cfg3.output.dir == "elsewhere"
    assert cfg3.mesh.nx == 8


# -- artifact files ----------------------------------------------------

def test_field_file_roundtrip(tmp_path):
    p = tmp_path / "beta.dat"
    x = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0])
    z = np.array([0.1, -0.2, 0.3])
    v = np.array([np.pi, -1e-17, 4.0])
    artio.write_field(p, "beta", (8, 3, 2), x, z, v)
    f = artio.read_field(p)
    assert f.name == "beta" and (f.nx, f.nz, f.k) == (8, 3, 2)
    # 17 significant digits round-trip doubles exactly
    assert np.array_equal(f.x, x) and np.array_equal(f.z, z)
    assert np.array_equal(f.values, v)
    with pytest.raises(ConfigurationError):
        artio.write_field(tmp_path / "bad.dat", "b", (1, 1, 2),
                          x, z, np.zeros(4))
    other = tmp_path / "plain.txt"
    other.write_text("not a field\n")
    with pytest.raises(ConfigurationError):
        artio.read_field(other)


def test_csv_and_record_roundtrip(tmp_path):
    p = tmp_path / "t.csv"
    artio.write_csv(p, ["a", "b"], [[1, 0.5], [True, 1e-300]])
    header, rows = artio.read_csv(p)
    assert header == ["a", "b"]
    assert rows == [["1", "0.5"], ["true", "1e-300"]]
    rp = tmp_path / "record.txt"
    artio.update_record(rp, {"z.k": 1, "a.k": 2.5})
    artio.update_record(rp, {"m.k": True, "a.k": 3.0})
    assert rp.read_text() == "a.k=3\nm.k=true\nz.k=1\n"
    assert artio.read_record(rp) == {"a.k": "3", "m.k": "true", "z.k": "1"}


def test_observation_bundle_roundtrip(tmp_path, tiny):
    dims = (tiny.mesh.nx, tiny.mesh.nz, tiny.mesh.k)
    top = tiny.mesh.boundary_nodes["top"]
    artio.write_observations(tmp_path, dims, tiny.obs.x,
                             tiny.mesh.coords[top, 1], tiny.obs)
    back = artio.read_observations(tmp_path, eps_norm=1e-9)
    assert np.array_equal(back.x, tiny.obs.x)
    assert np.array_equal(back.vx, tiny.obs.vx)
    assert np.array_equal(back.vz, tiny.obs.vz)
    assert np.array_equal(back.sigma, tiny.obs.sigma)
    (tmp_path / "obs_vz.dat").unlink()
    with pytest.raises(ConfigurationError):
        artio.read_observations(tmp_path)


# -- pipeline stages ---------------------------------------------------

def test_flat_slab_forward_stage(tmp_path):
    cfg = with_output(parse_config(FLAT), tmp_path / "out")
    out = Pipeline(cfg).run("forward")
    # floating equilibrium: the ocean load exactly balances gravity
    assert out["max_speed"] < 1e-10
    f = artio.read_field(tmp_path / "out" / "velocity_x.dat")
    assert np.abs(f.values).max() < 1e-10
    rec = artio.read_record(tmp_path / "out" / "record.txt")
    assert rec["forward.converged"] == "true"


def test_stage_dependency_errors(tmp_path):
    cfg = with_output(parse_config(MICRO), tmp_path / "out")
    pipe = Pipeline(cfg)
    with pytest.raises(StageError, match="synth"):
        pipe.run("invert")
    with pytest.raises(StageError, match="invert"):
        pipe.run("spectrum")
    with pytest.raises(StageError, match="invert"):
        pipe.run("sample")
    with pytest.raises(ConfigurationError):
        pipe.run("warp")


def test_synth_stage_determinism(tmp_path):
    base = parse_config(MICRO)
    for d, seed in (("a", 3), ("b", 3), ("c", 4)):
        cfg = with_output(with_seed(base, seed), tmp_path / d)
        Pipeline(cfg).run("synth")
    a = (tmp_path / "a" / "obs_vx.dat").read_bytes()
    b = (tmp_path / "b" / "obs_vx.dat").read_bytes()
    c = (tmp_path / "c" / "obs_vx.dat").read_bytes()
    assert a == b
    assert a != c


def test_full_chain_and_ledger(tmp_path):
    cfg = with_output(parse_config(MICRO), tmp_path / "out")
    Pipeline(cfg).run("all")
    out = tmp_path / "out"
    for fname in ("obs_vx.dat", "beta_true.dat", "beta_map.dat",
                  "lcurve.csv", "spectrum.csv", "prediction.csv",
                  "prior_std.dat", "post_std.dat", "record.txt"):
        assert (out / fname).exists(), fname
    rec = artio.read_record(out / "record.txt")
    assert rec["invert.converged"] == "true"
    stage_totals = sum(int(v) for k, v in rec.items()
                       if k.endswith(".solves.total")
                       and not k.startswith("all."))
    assert int(rec["all.solves.total"]) == stage_totals
    assert stage_totals > 0
    # retained eigenvector dumps match the spectrum table
    _, rows = artio.read_csv(out / "spectrum.csv")
    for i in range(len(rows)):
        assert (out / f"evec_{i}.dat").exists()
    lam = np.array([float(r[1]) for r in rows])
    assert np.all(np.diff(lam) <= 0) and np.all(lam >= 0.2)
    # posterior deviation never exceeds the prior deviation
    prior_std = artio.read_field(out / "prior_std.dat").values
    post_std = artio.read_field(out / "post_std.dat").values
    assert np.all(post_std <= prior_std * (1.0 + 1e-12))


# -- command line ------------------------------------------------------

def test_cli_runs_and_reports_errors(tmp_path, capsys):
    cfgfile = tmp_path / "micro.ini"
    cfgfile.write_text(MICRO)
    assert cli_main(["synth", "--config", str(cfgfile),
                     "--out", str(tmp_path / "o1")]) == 0
    assert cli_main(["forward", "--config", str(tmp_path / "missing.ini"),
                     "--out", str(tmp_path / "o2")]) == 1
    assert capsys.readouterr().err.startswith("iceinv: error:")
    bad = tmp_path / "bad.ini"
    bad.write_text("[weather]\nrain = 1\n")
    assert cli_main(["forward", "--config", str(bad),
                     "--out", str(tmp_path / "o3")]) == 1
    assert capsys.readouterr().err.startswith("iceinv: error:")
    # a missing dependency is a clean failure, not a traceback
    assert cli_main(["invert", "--config", str(cfgfile),
                     "--out", str(tmp_path / "o4")]) == 1
    err = capsys.readouterr().err
    assert "synth" in err
    with pytest.raises(SystemExit):
        cli_main(["frobnicate"])


def test_cli_seed_flag_changes_noise(tmp_path):
    cfgfile = tmp_path / "micro.ini"
    cfgfile.write_text(MICRO)
    for out, seed in (("s1", "11"), ("s2", "11"), ("s3", "12")):
        assert cli_main(["synth", "--config", str(cfgfile), "--seed", seed,
                         "--out", str(tmp_path / out)]) == 0
    s1 = (tmp_path / "s1" / "obs_vx.dat").read_bytes()
    s2 = (tmp_path / "s2" / "obs_vx.dat").read_bytes()
    s3 = (tmp_path / "s3" / "obs_vx.dat").read_bytes()
    assert s1 == s2 and s1 != s3


def test_console_script_entry_point(tmp_path):
    cfgfile = tmp_path / "flat.ini"
    cfgfile.write_text(FLAT)
    proc = subprocess.run(
        [sys.executable, "-m", "iceinv.cli", "forward",
         "--config", str(cfgfile), "--out", str(tmp_path / "o")],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "velocity_x.dat").exists()
