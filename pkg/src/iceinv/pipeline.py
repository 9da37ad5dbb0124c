"""
Stage runner behind the CLI: synthetic data, inversion, L-curve,
posterior spectrum, sampling, prediction.

Each stage reads its inputs from the output directory (never from
in-process state of another stage), so any stage can rerun in isolation
and a missing input names the stage that produces it.  All randomness
derives from the single master seed through named substreams, one per
consumer, so e.g. rerunning `sample` cannot perturb the noise
realization.  Stage records merge into `record.txt` under dotted keys;
`all` additionally writes the cross-stage solve ledger.
"""

import os

import numpy as np

from .mesh import ConfigurationError, build_mesh
from .stokes import StokesAssembler, solve_forward, surface_velocity
from .adjoint import ObservationSet, SurfaceMisfit, linearize
from .prior import PriorModel
from .inversion import SolveCounter, invert, lcurve_scan
from .lowrank import LowRankPosterior, build_posterior
from .prediction import predict
from . import io as artio

STREAMS = {"noise": 0, "prior": 1, "gevd": 2, "posterior": 3}

STAGES = ("forward", "synth", "invert", "lcurve", "spectrum", "sample",
          "predict", "all")

# canonical producer of each artifact, for dependency errors
_PRODUCER = {
    "obs_vx.dat": "synth", "obs_vz.dat": "synth", "obs_sigma.dat": "synth",
    "beta_map.dat": "invert", "spectrum.csv": "spectrum",
}


class StageError(RuntimeError):
    """A stage cannot run; the message names what to do first."""


class Pipeline:
    def __init__(self, cfg, threads=1):
        self.cfg = cfg
        self.threads = int(threads)
        self.out = cfg.output.dir
        os.makedirs(self.out, exist_ok=True)
        self._mesh = None
        self._assembler = None

    # -- shared construction -------------------------------------------

    @property
    def mesh(self):
        if self._mesh is None:
            self._mesh = self.cfg.build_mesh()
        return self._mesh

    @property
    def assembler(self):
        if self._assembler is None:
            self._assembler = StokesAssembler(self.mesh, self.cfg.physics_params())
        return self._assembler

    def rng(self, name):
        seq = np.random.SeedSequence((self.cfg.observation.seed, STREAMS[name]))
        return np.random.default_rng(seq)

    def path(self, name):
        return os.path.join(self.out, name)

    def _dims(self, mesh=None):
        m = self.cfg.mesh
        return (m.nx, m.nz, m.order) if mesh is None else (mesh.nx, mesh.nz, mesh.k)

    def _require(self, fname, stage):
        p = self.path(fname)
        if not os.path.exists(p):
            producer = _PRODUCER.get(fname, "an earlier")
            raise StageError(
                f"stage '{stage}' needs {fname}; run the '{producer}' stage first")
        return p

    def _record(self, mapping):
        artio.update_record(self.path("record.txt"), mapping)

    def _prior(self):
        pr = self.cfg.prior
        return PriorModel(self.mesh, gamma=pr.gamma, delta=pr.delta,
                          kappa=pr.kappa, beta0=pr.beta0)

    def _misfit(self):
        obs = artio.read_observations(self.out,
                                      eps_norm=self.cfg.observation.eps_norm)
        return SurfaceMisfit(self.mesh, obs, mode=self.cfg.observation.mode)

    def _beta_on(self, field_spec, mesh):
        return field_spec(mesh.basal_x, self.cfg.domain.length)

    def _write_basal(self, name, values):
        artio.write_field(self.path(name + ".dat"), name, self._dims(),
                          self.mesh.basal_x, self.mesh.basal_z, values)

    def _load_map(self, stage):
        self._require("beta_map.dat", stage)
        f = artio.read_field(self.path("beta_map.dat"))
        if f.values.size != self.mesh.basal_x.size:
            raise StageError("stored beta_map does not match the mesh; "
                             "rerun the 'invert' stage")
        return f.values

    def _load_posterior(self, stage):
        beta_map = self._load_map(stage)
        self._require("spectrum.csv", stage)
        _, rows = artio.read_csv(self.path("spectrum.csv"))
        lam = np.array([float(r[1]) for r in rows])
        W = np.empty((beta_map.size, lam.size))
        for i in range(lam.size):
            p = self.path(f"evec_{i}.dat")
            if not os.path.exists(p):
                raise StageError(f"stage '{stage}' needs evec_{i}.dat; "
                                 "run the 'spectrum' stage first")
            W[:, i] = artio.read_field(p).values
        return LowRankPosterior(self._prior(), beta_map, lam, W)

    # -- stages --------------------------------------------------------

    def stage_forward(self):
        beta = self._beta_on(self.cfg.synth.beta_true, self.mesh)
        state, rec, _ = solve_forward(self.assembler, beta,
                                      cfg=self.cfg.newton_config())
        m = self.mesh
        dims = self._dims()
        artio.write_field(self.path("velocity_x.dat"), "velocity_x", dims,
                          m.coords[:, 0], m.coords[:, 1], state.u[0::2])
        artio.write_field(self.path("velocity_z.dat"), "velocity_z", dims,
                          m.coords[:, 0], m.coords[:, 1], state.u[1::2])
        pc = m.pressure_dof_coords()
        artio.write_field(self.path("pressure.dat"), "pressure", dims,
                          pc[:, 0], pc[:, 1], state.p)
        speed = np.hypot(state.u[0::2], state.u[1::2])
        self._record({
            "forward.max_speed": float(speed.max()),
            "forward.newton_iters": rec.newton_iters,
            "forward.converged": rec.converged,
            "forward.solves.total": rec.linear_solves,
        })
        return {"max_speed": float(speed.max())}

    def stage_synth(self):
        cfg = self.cfg
        fine = cfg.build_mesh(refine=cfg.synth.fine_factor)
        fine_asm = StokesAssembler(fine, cfg.physics_params())
        beta_fine = self._beta_on(cfg.synth.beta_true, fine)
        state, rec, _ = solve_forward(fine_asm, beta_fine,
                                      cfg=cfg.newton_config())
        us = surface_velocity(fine, state)
        top_f = fine.boundary_nodes["top"]
        xs_f = fine.coords[top_f, 0]
        # noise is drawn once on the fine surface lattice and subsampled,
        # so shared positions see identical noise at any resolution
        zeta = self.rng("noise").standard_normal((2, xs_f.size))
        top_r = self.mesh.boundary_nodes["top"]
        xs_r = self.mesh.coords[top_r, 0]
        pick = np.searchsorted(xs_f, xs_r)
        if np.abs(xs_f[pick] - xs_r).max() > 1e-9 * cfg.domain.length:
            raise ConfigurationError(
                "run-mesh surface lattice is not nested in the fine lattice")
        vx, vz = us[0::2][pick], us[1::2][pick]
        scale = np.sqrt(vx ** 2 + vz ** 2 + cfg.observation.eps_norm)
        # the misfit weighting keeps the paper's 10% noise model even when
        # the injected noise level differs (noise_rel=0 gives exact data)
        sigma = 0.1 * scale
        obs = ObservationSet(
            x=xs_r,
            vx=vx + cfg.observation.noise_rel * scale * zeta[0][pick],
            vz=vz + cfg.observation.noise_rel * scale * zeta[1][pick],
            sigma=sigma, eps_norm=cfg.observation.eps_norm)
        zs_r = self.mesh.coords[top_r, 1]
        artio.write_observations(self.out, self._dims(), xs_r, zs_r, obs)
        self._write_basal("beta_true", self._beta_on(cfg.synth.beta_true,
                                                     self.mesh))
        self._record({
            "synth.fine_nx": fine.nx, "synth.fine_nz": fine.nz,
            "synth.n_obs": obs.size, "synth.newton_iters": rec.newton_iters,
            "synth.solves.total": rec.linear_solves,
            "synth.seed": cfg.observation.seed,
        })
        return {"n_obs": obs.size}

    def stage_invert(self):
        self._require("obs_vx.dat", "invert")
        misfit = self._misfit()
        cfg = self.cfg
        beta0 = self._beta_on(cfg.inversion.beta_init, self.mesh)
        factory = lambda g: PriorModel(self.mesh, gamma=g,
                                       delta=cfg.prior.delta,
                                       kappa=cfg.prior.kappa,
                                       beta0=cfg.prior.beta0)
        beta_map, ctx, rec = invert(self.assembler, misfit, factory, beta0,
                                    cfg=cfg.newton_cg_config(),
                                    newton_cfg=cfg.newton_config(),
                                    gamma=cfg.map_gamma())
        self._write_basal("beta_map", beta_map)
        j, jm, jr = ctx.cost()
        entries = {
            "invert.converged": rec.converged,
            "invert.newton_iters": rec.newton_iters,
            "invert.cg_iters": rec.cg_iters,
            "invert.grad_norm0": rec.grad_norm0,
            "invert.grad_norm": rec.grad_norm,
            "invert.grad_reduction": rec.grad_norm0 / rec.grad_norm,
            "invert.cost": j, "invert.misfit": jm, "invert.reg": jr,
            "invert.gamma": cfg.map_gamma(),
        }
        for name, count in rec.buckets.items():
            entries[f"invert.solves.{name}"] = count
        self._record(entries)
        return {"record": rec, "beta_map": beta_map}

    def stage_lcurve(self):
        self._require("obs_vx.dat", "lcurve")
        misfit = self._misfit()
        cfg = self.cfg
        beta0 = self._beta_on(cfg.inversion.beta_init, self.mesh)
        factory = lambda g: PriorModel(self.mesh, gamma=g,
                                       delta=cfg.prior.delta,
                                       kappa=cfg.prior.kappa,
                                       beta0=cfg.prior.beta0)
        gammas = cfg.lcurve.gammas.values()
        points, corner = lcurve_scan(
            self.assembler, misfit, factory, beta0, gammas,
            cfg=cfg.newton_cg_config(continuation=cfg.lcurve.continuation),
            newton_cfg=cfg.newton_config(), threads=self.threads)
        artio.write_csv(self.path("lcurve.csv"),
                        ["gamma", "misfit", "reg", "total", "newton_iters",
                         "cg_iters"],
                        [[p.gamma, p.misfit, p.reg, p.total, p.newton_iters,
                          p.cg_iters] for p in points])
        self._record({
            "lcurve.n_points": len(points),
            "lcurve.corner_index": corner,
            "lcurve.corner_gamma": points[corner].gamma,
            "lcurve.solves.total": sum(p.solves for p in points),
            "lcurve.failures": sum(1 for p in points if p.error),
        })
        return {"points": points, "corner": corner}

    def stage_spectrum(self):
        beta_map = self._load_map("spectrum")
        self._require("obs_vx.dat", "spectrum")
        misfit = self._misfit()
        counter = SolveCounter()
        state, rec, x = solve_forward(self.assembler, beta_map,
                                      cfg=self.cfg.newton_config(),
                                      counter=counter)
        prior = self._prior()
        ctx = linearize(self.assembler, beta_map, x, misfit, prior,
                        counter=counter)
        g = self.cfg.gevd
        post, res = build_posterior(
            ctx, prior, beta_map, g.rank_max, oversample=g.oversample,
            power=g.power, rng=self.rng("gevd"), threshold=g.threshold,
            gauss_newton=(g.mode == "gauss-newton"))
        lam_r, W_r = res.retained()
        artio.write_csv(self.path("spectrum.csv"), ["index", "lambda"],
                        [[i, lam] for i, lam in enumerate(lam_r)])
        for i in range(lam_r.size):
            self._write_basal(f"evec_{i}", W_r[:, i])
        self._record({
            "spectrum.rank": res.rank,
            "spectrum.width": res.eigenvalues.size,
            "spectrum.exhausted": res.exhausted,
            "spectrum.threshold": res.threshold,
            "spectrum.lambda_max": float(res.eigenvalues.max()),
            "spectrum.hessian_applies": res.hessian_applies,
            "spectrum.solves.total": counter.n + res.linear_solves,
        })
        return {"result": res, "posterior": post}

    def stage_sample(self):
        post = self._load_posterior("sample")
        n = self.cfg.sampling.n_samples
        prior_draws = np.atleast_2d(post.prior.sample(self.rng("prior"), size=n))
        post_draws = np.atleast_2d(post.sample(self.rng("posterior"), size=n))
        var_prior = post.prior.pointwise_variance()
        var_post = post.pointwise_variance()
        self._write_basal("prior_std", np.sqrt(var_prior))
        self._write_basal("post_std", np.sqrt(var_post))
        for i in range(min(self.cfg.sampling.n_dump, n)):
            self._write_basal(f"sample_prior_{i}", prior_draws[i])
            self._write_basal(f"sample_post_{i}", post_draws[i])
        self._record({
            "sample.n": n,
            "sample.mean_var_prior": float(var_prior.mean()),
            "sample.mean_var_post": float(var_post.mean()),
            "sample.var_ratio": float(var_post.mean() / var_prior.mean()),
            "sample.emp_var_ratio_post": float(
                post_draws.var(axis=0, ddof=1).mean() / var_post.mean()),
            "sample.solves.total": 0,
        })
        return {"posterior": post}

    def stage_predict(self):
        post = self._load_posterior("predict")
        self._require("obs_vx.dat", "predict")
        misfit = self._misfit()
        counter = SolveCounter()
        state, rec, x = solve_forward(self.assembler, post.beta_map,
                                      cfg=self.cfg.newton_config(),
                                      counter=counter)
        ctx = linearize(self.assembler, post.beta_map, x, misfit,
                        post.prior, counter=counter)
        specs = self.cfg.qoi_specs()
        reports = predict(ctx, post, specs)
        artio.write_csv(self.path("prediction.csv"),
                        ["qoi_tag", "q_map", "sigma_post", "sigma_prior",
                         "Sigma2"],
                        [[r.tag, r.q_map, r.sigma_post, r.sigma_prior,
                          r.Sigma2] for r in reports])
        entries = {"predict.solves.total": counter.n + len(specs)}
        for r in reports:
            self._write_basal(f"pred_grad_{r.tag}", r.gradient)
            self._write_basal(f"ifp_{r.tag}", r.direction)
            entries[f"predict.{r.tag}.q_map"] = r.q_map
            entries[f"predict.{r.tag}.sigma_post"] = r.sigma_post
            entries[f"predict.{r.tag}.sigma_prior"] = r.sigma_prior
        self._record(entries)
        return {"reports": reports}

    def stage_all(self):
        out = {}
        for stage in ("synth", "invert", "lcurve", "spectrum", "sample",
                      "predict"):
            out[stage] = self.run(stage)
        rec = artio.read_record(self.path("record.txt"))
        total = sum(int(v) for k, v in rec.items()
                    if k.endswith(".solves.total") and not k.startswith("all."))
        self._record({"all.solves.total": total})
        return out

    def run(self, stage):
        if stage not in STAGES:
            raise ConfigurationError(f"unknown stage {stage!r}")
        return getattr(self, f"stage_{stage}")()
