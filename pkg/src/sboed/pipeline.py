"""Pipeline stages behind the command-line interface.

Each stage reads its upstream artifacts from the output directory, checks
their manifests, and writes its own artifacts, a manifest and a metrics
JSON.  Wall-clock timings go to a separate ``timing.json`` so metric files
stay reproducible bit for bit.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Tuple

import numpy as np

from .config import config_hash, seed_int, substream
from .errors import ContractError
from .forward import AdvectionDiffusion, Grid, PdeConfig, make_velocity
from .io import build_id, json_hash, load_array, read_json, save_array, write_json
from .lano import (
    LanoConfig,
    Surrogate,
    TrainingSet,
    lano_train,
    loss_decomposition,
    reduced_gn_eigs,
    reduced_hessian,
    reduced_observations,
    surrogate_map,
)
from .laplace import ExperimentHistory, InverseProblem, NoiseModel, d_optimality
from .linalg import dense_sym_eig
from .nn import load_checkpoint, save_checkpoint
from .prior import PriorOperator
from .reduction import (
    ReducedBases,
    active_subspace,
    parameter_projection_error,
    pca_states,
    project_training_targets,
    retained_variance,
)
from .rl import (
    DesignBounds,
    EpisodeInputs,
    SensorEnv,
    evaluate_policy,
    init_networks,
    observe_field,
    policy_act,
    random_designs,
    train_policy,
    write_csv,
)

__all__ = [
    "Scenario",
    "build_scenario",
    "gen_data",
    "reduce",
    "train_surrogate",
    "validate_surrogate",
    "surrogate_errors",
    "train_policies",
    "evaluate",
    "compare_dopt",
    "STAGES",
]

# which config entries each stage's artifacts depend on
_DATA_KEYS = ["grid", "pde", "prior", "seeds", "reduction.n_samples"]
_STAGE_KEYS = {
    "data": _DATA_KEYS,
    "reduce": _DATA_KEYS + ["reduction"],
    "surrogate": _DATA_KEYS + ["reduction", "lano"],
    "validate": _DATA_KEYS + ["reduction", "lano"],
    "policy": _DATA_KEYS + ["reduction", "lano", "rl"],
    "eval": _DATA_KEYS + ["reduction", "lano", "rl", "eval"],
    "compare": _DATA_KEYS + ["reduction", "lano", "rl", "eval"],
}
STAGES = {
    "data": "gen-data",
    "reduce": "reduce",
    "surrogate": "train-surrogate",
    "validate": "validate-surrogate",
    "policy": "train-policy",
    "eval": "eval",
    "compare": "compare-dopt",
}


def stage_hash(cfg: dict, stage: str) -> str:
    picked = {}
    for key in _STAGE_KEYS[stage]:
        sec, _, sub = key.partition(".")
        picked[key] = cfg[sec][sub] if sub else cfg[sec]
    return json_hash(picked)[:16]


def _stamp(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "build_id": build_id(), "seed": int(cfg["seeds"]["root"])}


def _manifest_digest(out: Path, stage: str) -> str:
    return json_hash(read_json(out / stage / "manifest.json"))[:16]


def _write_manifest(out: Path, stage: str, cfg: dict, files: dict, inputs=(), **extra) -> dict:
    man = {
        "stage": stage,
        "stage_hash": stage_hash(cfg, stage),
        "inputs": {dep: _manifest_digest(out, dep) for dep in inputs},
        "files": files,
        **_stamp(cfg),
        **extra,
    }
    write_json(out / stage / "manifest.json", man)
    return man


def _require(out: Path, stage: str, cfg: dict) -> dict:
    """Load an upstream manifest, refusing missing or stale artifacts."""
    path = out / stage / "manifest.json"
    if not path.exists():
        raise ContractError(f"{path} is missing; run '{STAGES[stage]}' first")
    man = read_json(path)
    if man.get("stage_hash") != stage_hash(cfg, stage):
        raise ContractError(
            f"{stage} artifacts in {out} were produced with a different configuration; re-run '{STAGES[stage]}'"
        )
    for dep, digest in man.get("inputs", {}).items():
        if not (out / dep / "manifest.json").exists() or _manifest_digest(out, dep) != digest:
            raise ContractError(f"{stage} artifacts are stale: '{dep}' changed after they were produced")
    return man


def _write_metrics(out: Path, stage: str, cfg: dict, body: dict) -> dict:
    doc = {**_stamp(cfg), "stage": stage, **body}
    write_json(out / stage / "metrics.json", doc)
    return doc


def _load(out: Path, stage: str, name: str, man: dict) -> np.ndarray:
    return load_array(out / stage / name, expect_hash=man["files"][name])[0]


# -- scenario ---------------------------------------------------------------------------------
@dataclass
class Scenario:
    cfg: dict
    grid: Grid
    model: AdvectionDiffusion
    prior: PriorOperator
    bounds: DesignBounds
    obs_times: List[float]
    stage_sets: List[List[int]]
    stage_steps: List[List[int]]

    @property
    def dt(self) -> float:
        return self.model.cfg.dt

    @property
    def grid_hash(self) -> str:
        return json_hash(self.grid.describe())[:16]

    def upstream_directions(self, variant: str) -> np.ndarray:
        """Unit vectors against the flow of ``variant`` at the initial sensors."""
        vel = make_velocity(self.grid, variant, self.cfg["pde"]["velocity_strength"])
        v = np.array([vel.at(self.grid, p) for p in self.bounds.initial])
        norm = np.linalg.norm(v, axis=1, keepdims=True)
        if np.any(norm == 0):
            raise ContractError("flow vanishes at an initial sensor; upstream direction undefined")
        return -v / norm


def build_scenario(cfg: dict) -> Scenario:
    g, p = cfg["grid"], cfg["pde"]
    if g["obstacles"]:
        grid = Grid.with_rectangles(g["nx"], g["ny"], g["obstacles"], g["lx"], g["ly"])
    else:
        grid = Grid(g["nx"], g["ny"], g["lx"], g["ly"])
    pde = PdeConfig(p["kappa"], p["t_final"], p["n_steps"], p["theta"], p["initial_condition"], p["upwind"])
    model = AdvectionDiffusion(grid, pde, make_velocity(grid, p["velocity"], p["velocity_strength"]))
    pr = cfg["prior"]
    prior = PriorOperator(grid, pr["gamma"], pr["delta"], pr["mean"])
    rl = cfg["rl"]
    bounds = DesignBounds(np.asarray(rl["sensors"], float), np.asarray(rl["rects"], float), len(rl["stage_sets"]))
    obs_times = [float(t) for t in rl["obs_times"]]
    stage_sets = [list(map(int, s)) for s in rl["stage_sets"]]
    stage_steps = [[pde.step_index(obs_times[k - 1]) - 1 for k in s] for s in stage_sets]
    return Scenario(cfg, grid, model, prior, bounds, obs_times, stage_sets, stage_steps)


def _split(cfg: dict):
    r = cfg["reduction"]
    a, b, c = r["n_train"], r["n_valid"], r["n_test"]
    return np.arange(a), np.arange(a, a + b), np.arange(a + b, a + b + c)


def _meta(cfg: dict) -> dict:
    return _stamp(cfg)


# -- gen-data -----------------------------------------------------------------------------------
def gen_data(cfg: dict, out) -> dict:
    """Prior samples and their full state trajectories."""
    out = Path(out)
    sc = build_scenario(cfg)
    n = int(cfg["reduction"]["n_samples"])
    if n < 0:
        raise ContractError("sample count must be non-negative")
    rng = np.random.default_rng(substream(cfg["seeds"]["root"], "data"))
    N, K = sc.grid.n, sc.model.cfg.n_steps
    ms = sc.prior.sample(rng=rng, n_samples=n) if n > 0 else np.zeros((0, N))
    U = np.stack([sc.model.solve_forward(m).states for m in ms]) if n > 0 else np.zeros((0, K + 1, N))
    meta = _meta(cfg)
    files = {
        "m": save_array(out / "data" / "m", ms, **meta),
        "u": save_array(out / "data" / "u", U, **meta),
    }
    _write_manifest(out, "data", cfg, files, count=n, grid_hash=sc.grid_hash, prior_hash=sc.prior.fingerprint())
    body = {"count": n, "n_nodes": N, "n_steps": K}
    if n > 0:
        body["state_abs_max"] = float(np.abs(U).max())
        body["parameter_mean"] = float(ms.mean())
    return _write_metrics(out, "data", cfg, body)


# -- reduce -------------------------------------------------------------------------------------------
_TARGETS = ("beta_m", "beta_u0", "beta_u", "beta_J")


def reduce(cfg: dict, out) -> dict:
    """Active-subspace and PCA bases, then reduced training targets for every sample."""
    out = Path(out)
    sc = build_scenario(cfg)
    dman = _require(out, "data", cfg)
    ms, U = _load(out, "data", "m", dman), _load(out, "data", "u", dman)
    if dman["count"] != ms.shape[0] or ms.shape[0] != U.shape[0]:
        raise ContractError("data manifest count disagrees with the stored arrays")
    red = cfg["reduction"]
    train, _, test = _split(cfg)
    if train.size < 2 or train[-1] >= ms.shape[0]:
        raise ContractError("not enough stored samples for the training split")
    as_seed = seed_int(substream(cfg["seeds"]["root"], "data", 1))
    psi_m, lam = active_subspace(
        sc.model, sc.prior, ms[train[: red["as_samples"]]], red["r_m"], seed=as_seed, oversample=red["oversample"]
    )
    # the initial states are the squared parameters and are fed to the network directly,
    # so only the propagated snapshots enter the state basis
    psi_u, ubar, sing = pca_states([U[i, 1:] for i in train], red["r_u"])
    bases = ReducedBases(psi_m, psi_u, ubar, lam, sing, meta={"grid_hash": sc.grid_hash, "prior_hash": sc.prior.fingerprint()})
    bases.check(sc.prior)
    meta = _meta(cfg)
    bman = bases.save(out / "reduce" / "bases", **meta)
    samples = [project_training_targets(sc.model, sc.prior, bases, m, u) for m, u in zip(ms, U)]
    ts = TrainingSet.stack(samples)
    files = {name: save_array(out / "reduce" / name, getattr(ts, name), **meta) for name in _TARGETS}
    _write_manifest(out, "reduce", cfg, files, inputs=["data"], bases=bman["files"], fingerprint=bases.fingerprint())
    body = {
        "r_m": bases.r_m,
        "r_u": bases.r_u,
        "active_subspace_eigenvalues": lam.tolist(),
        "pca_retained_variance": retained_variance(sing, bases.r_u),
    }
    if test.size and test[-1] < ms.shape[0]:
        body["parameter_projection_error_test"] = float(np.mean([parameter_projection_error(sc.prior, bases, ms[i]) for i in test]))
        body["state_projection_floor_test"] = float(np.mean(_projection_floor(bases, U[test])))
    return _write_metrics(out, "reduce", cfg, body)


def _projection_floor(bases: ReducedBases, U: np.ndarray) -> np.ndarray:
    """Relative error of the best reconstruction in the state basis, per sample and step."""
    u = U[:, 1:]
    c = u - bases.u_bar
    rec = bases.u_bar + (c @ bases.psi_u) @ bases.psi_u.T
    return np.linalg.norm(rec - u, axis=-1) / np.linalg.norm(u, axis=-1)


def _load_bases(out: Path, cfg: dict, sc: Scenario):
    man = _require(out, "reduce", cfg)
    bases = ReducedBases.load(out / "reduce" / "bases", grid_hash=sc.grid_hash, prior_hash=sc.prior.fingerprint())
    if bases.fingerprint() != man["fingerprint"]:
        raise ContractError("stored bases do not match the reduce manifest")
    ts = TrainingSet(*(_load(out, "reduce", name, man) for name in _TARGETS))
    return bases, ts


# -- surrogate ------------------------------------------------------------------------------------
def lano_config(cfg: dict, K: int, state_scale: float) -> LanoConfig:
    r, c = cfg["reduction"], cfg["lano"]
    return LanoConfig(
        r_m=r["r_m"],
        r_u=r["r_u"],
        d_z=c["d_z"],
        d_a=c["d_a"],
        K=K,
        hidden_decoder=c["hidden_decoder"],
        ffn_hidden=c["ffn_hidden"],
        lambda_jac=c["lambda_jac"],
        state_scale=state_scale,
    )


def train_surrogate(cfg: dict, out) -> dict:
    out = Path(out)
    sc = build_scenario(cfg)
    bases, ts = _load_bases(out, cfg, sc)
    train, valid, _ = _split(cfg)
    tr, va = ts.subset(train), ts.subset(valid) if valid.size else None
    lc = lano_config(cfg, sc.model.cfg.n_steps, tr.state_scale())
    c = cfg["lano"]
    seed = seed_int(substream(cfg["seeds"]["root"], "surrogate"))
    res = lano_train(tr, va, lc, epochs=c["epochs"], batch=c["batch"], lr=c["lr"], seed=seed, patience=c["patience"])
    sur = Surrogate(res.params, lc, bases, sc.prior.mean)
    sur.save(out / "surrogate" / "lano", **_meta(cfg))
    write_csv(out / "surrogate" / "curves.csv", res.curves)
    _write_manifest(out, "surrogate", cfg, {"lano": res.params.checksum()}, inputs=["reduce"])
    write_json(out / "surrogate" / "timing.json", {"train_seconds": res.seconds})
    body = {
        "best_epoch": res.best_epoch,
        "epochs_run": len(res.curves),
        "train": loss_decomposition(res.params, tr, lc),
        "state_scale": lc.state_scale,
        "n_params": int(res.params.flat.size),
    }
    if va is not None:
        body["valid"] = loss_decomposition(res.params, va, lc)
    return _write_metrics(out, "surrogate", cfg, body)


def _load_surrogate(out: Path, cfg: dict, sc: Scenario):
    bases, ts = _load_bases(out, cfg, sc)
    man = _require(out, "surrogate", cfg)
    sur = Surrogate.load(out / "surrogate" / "lano", bases, sc.prior.mean)
    if sur.params.checksum() != man["files"]["lano"]:
        raise ContractError("surrogate weights differ from the train-surrogate manifest")
    return sur, bases, ts


def surrogate_errors(sur: Surrogate, bases: ReducedBases, states: np.ndarray, targets: TrainingSet) -> dict:
    """Time-resolved relative errors of the surrogate on held-out trajectories.

    ``states`` holds full trajectories ``(n, K + 1, N)``; errors are taken
    at steps ``1..K``.
    """
    bu, J = sur.batch(targets.beta_m, targets.beta_u0)
    u = states[:, 1:]
    full = bases.u_bar + bu @ bases.psi_u.T
    state = np.linalg.norm(full - u, axis=-1) / np.linalg.norm(u, axis=-1)
    reduced = np.linalg.norm(bu - targets.beta_u, axis=-1) / np.linalg.norm(targets.beta_u, axis=-1)
    jac = np.linalg.norm(J - targets.beta_J, axis=(-2, -1)) / np.linalg.norm(targets.beta_J, axis=(-2, -1))
    floor = _projection_floor(bases, states)
    return {
        "state_error": state,
        "reduced_state_error": reduced,
        "jacobian_error": jac,
        "projection_floor": floor,
    }


def validate_surrogate(cfg: dict, out) -> dict:
    out = Path(out)
    sc = build_scenario(cfg)
    sur, bases, ts = _load_surrogate(out, cfg, sc)
    dman = _require(out, "data", cfg)
    U = _load(out, "data", "u", dman)
    _, _, test = _split(cfg)
    if test.size == 0:
        raise ContractError("the test split is empty")
    err = surrogate_errors(sur, bases, U[test], ts.subset(test))
    K = sc.model.cfg.n_steps
    rows = [{"step": k + 1, **{name: float(v[:, k].mean()) for name, v in err.items()}} for k in range(K)]
    write_csv(out / "validate" / "errors.csv", rows)
    _write_manifest(out, "validate", cfg, {}, inputs=["surrogate"])
    body = {
        "n_test": int(test.size),
        # per-sample time average, then the mean over samples
        "state_error_mean": float(err["state_error"].mean()),
        "jacobian_error_mean": float(err["jacobian_error"].mean()),
        "reduced_state_error_mean": float(err["reduced_state_error"].mean()),
        "projection_floor_mean": float(err["projection_floor"].mean()),
        "per_step": {name: v.mean(axis=0).tolist() for name, v in err.items()},
    }
    return _write_metrics(out, "validate", cfg, body)


# -- policy ---------------------------------------------------------------------------------------
def episode_inputs(sur: Surrogate, prior: PriorOperator, ms: np.ndarray) -> EpisodeInputs:
    """Surrogate latents for prior samples; the initial state uses the exact squared parameter."""
    bases = sur.bases
    BM = prior.whiten(bases, ms.T).T
    B0 = (ms**2 - bases.u_bar) @ bases.psi_u
    bu, J = sur.batch(BM, B0)
    return EpisodeInputs(BM, bu, J)


def make_env(sc: Scenario, bases: ReducedBases) -> SensorEnv:
    return SensorEnv(sc.grid, bases, sc.bounds, sc.stage_steps, sc.cfg["rl"]["noise_fraction"])


def _batches(sur, prior, rng, L: int, M: int) -> Iterator[EpisodeInputs]:
    for _ in range(L):
        yield episode_inputs(sur, prior, prior.sample(rng=rng, n_samples=M))


def _stage_one(env: SensorEnv, policy) -> np.ndarray:
    """First-stage displacement in cap units, one row per sensor (the first state is always empty)."""
    d = policy_act(policy, env, 0, np.zeros((1, env.dim_x)))[0]
    return (d / env.bounds.cap_vector).reshape(env.S, 2)


def train_policies(cfg: dict, out, log=None) -> dict:
    out = Path(out)
    sc = build_scenario(cfg)
    sur, bases, _ = _load_surrogate(out, cfg, sc)
    r = cfg["rl"]
    ref = sc.upstream_directions("g1")
    own = sc.upstream_directions(cfg["pde"]["velocity"])
    per_seed, files, timing = {}, {}, {}
    for s in r["seeds"]:
        ss = substream(cfg["seeds"]["root"], "rl", s)
        rng = np.random.default_rng(ss)
        env = make_env(sc, bases)
        net_seed = seed_int(ss)
        init = init_networks(env, net_seed, r["final_init"])
        res = train_policy(
            env,
            _batches(sur, sc.prior, rng, r["L"], r["M"]),
            r["critic_steps"],
            r["lr_actor"],
            r["lr_critic"],
            r["decay"],
            seed=net_seed,
            init=init,
            log=None if log is None else (lambda row, s=s: log(s, row)),
            explore=r["explore"],
        )
        d = out / "policy" / f"seed{s}"
        scales = {"reward_shift": env.reward_shift, "reward_scale": env.reward_scale, "obs_scale": env.obs_scale}
        save_checkpoint(d / "policy", res.policy, **scales, **_meta(cfg))
        save_checkpoint(d / "critic", res.critic, **scales, **_meta(cfg))
        write_csv(d / "curves.csv", res.curves)
        files[f"seed{s}"] = res.policy.checksum()
        timing[f"seed{s}"] = res.seconds
        obj = np.array([row["objective"] for row in res.curves])
        k = min(10, obj.size)
        first, last = (float(obj[:k].mean()), float(obj[-k:].mean())) if obj.size else (float("nan"),) * 2
        d1 = _stage_one(env, res.policy)
        per_seed[f"seed{s}"] = {
            "objective_first10": first,
            "objective_last10": last,
            "relative_gain": last / first - 1.0 if obj.size else float("nan"),
            "stage1_displacement_caps": d1.tolist(),
            "stage1_projection_reference_upstream": float(np.mean(np.sum(d1 * ref, axis=1))),
            "stage1_projection_own_upstream": float(np.mean(np.sum(d1 * own, axis=1))),
            "final_action_std_caps": res.curves[-1]["action_std"] if res.curves else None,
        }
    _write_manifest(out, "policy", cfg, files, inputs=["surrogate"])
    write_json(out / "policy" / "timing.json", {"train_seconds": timing})
    body = {"velocity": cfg["pde"]["velocity"], "reference_upstream": ref.tolist(), "seeds": per_seed}
    return _write_metrics(out, "policy", cfg, body)


def _load_policy(out: Path, cfg: dict, s: int):
    man = _require(out, "policy", cfg)
    pol, _, desc = load_checkpoint(out / "policy" / f"seed{s}" / "policy")
    if pol.checksum() != man["files"].get(f"seed{s}"):
        raise ContractError(f"policy checkpoint for seed {s} differs from the train-policy manifest")
    return pol, desc


# -- eval --------------------------------------------------------------------------------------------
def _test_inputs(sur, ts: TrainingSet, idx) -> EpisodeInputs:
    sub = ts.subset(idx)
    bu, J = sur.batch(sub.beta_m, sub.beta_u0)
    return EpisodeInputs(sub.beta_m, bu, J)


def evaluate(cfg: dict, out) -> dict:
    out = Path(out)
    sc = build_scenario(cfg)
    sur, bases, ts = _load_surrogate(out, cfg, sc)
    _, _, test = _split(cfg)
    e = cfg["eval"]
    idx = test[: e["n_test_params"]]
    if idx.size < e["n_test_params"]:
        raise ContractError("fewer test parameters stored than requested")
    inputs = _test_inputs(sur, ts, idx)
    per_seed = {}
    for s in cfg["rl"]["seeds"]:
        pol, _ = _load_policy(out, cfg, s)
        env = make_env(sc, bases)
        rows = evaluate_policy(env, pol, inputs, e["n_random"], seed=seed_int(substream(cfg["seeds"]["root"], "eval", s)))
        for row, i in zip(rows, idx):
            row["parameter"] = int(i)
        write_csv(out / "eval" / f"seed{s}.csv", rows)
        wins = [r["win_rate"] for r in rows]
        per_seed[f"seed{s}"] = {
            "rows": rows,
            "params_with_win_rate_ge_0.7": None if e["n_random"] == 0 else int(sum(w >= 0.7 for w in wins)),
        }
    _write_manifest(out, "eval", cfg, {}, inputs=["policy"])
    return _write_metrics(out, "eval", cfg, {"n_random": e["n_random"], "test_parameters": idx.tolist(), "seeds": per_seed})


# -- compare-dopt ---------------------------------------------------------------------------------
def _pearson(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.size < 2 or a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])


def _rel_rmse(approx, ref) -> float:
    approx, ref = np.asarray(approx), np.asarray(ref)
    return float(np.sqrt(np.mean(((approx - ref) / ref) ** 2)))


def _history(sc: Scenario, U: np.ndarray, designs: np.ndarray, rng) -> Tuple[ExperimentHistory, NoiseModel]:
    """Noisy observations of one true trajectory along a design sequence."""
    coords, track = sc.bounds.initial, []
    for d in designs:
        coords = coords + d.reshape(sc.bounds.n_sensors, 2)
        track.append(coords)
    steps = [sc.model.cfg.step_index(t) for t in sc.obs_times]
    ref = np.concatenate([observe_field(sc.grid, sc.bounds.initial, U[k]) for k in steps])
    noise = NoiseModel(sc.cfg["rl"]["noise_fraction"] * float(np.abs(ref).max()))
    obs = []
    for n, stage in enumerate(sc.stage_sets):
        clean = np.array([observe_field(sc.grid, track[n], U[steps[k - 1]]) for k in stage])
        obs.append(clean + noise.sigma * rng.standard_normal(clean.shape))
    return ExperimentHistory(sc.obs_times, sc.stage_sets, list(designs), track, obs), noise


def _median_seconds(fn, repeats: int) -> float:
    fn()  # warm-up (compilation, factorisations)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def compare_dopt(cfg: dict, out, log=None) -> dict:
    """D-optimality from the full model, the surrogate MAP, the prior-sample proxy and projected truth."""
    out = Path(out)
    sc = build_scenario(cfg)
    sur, bases, ts = _load_surrogate(out, cfg, sc)
    dman = _require(out, "data", cfg)
    ms, U = _load(out, "data", "m", dman), _load(out, "data", "u", dman)
    _, _, test = _split(cfg)
    e = cfg["eval"]
    idx = test[: e["compare_params"]]
    if idx.size < e["compare_params"]:
        raise ContractError("fewer test parameters stored than requested")
    rng = np.random.default_rng(substream(cfg["seeds"]["root"], "eval", 10_000))
    n_obs = sc.bounds.n_sensors * len(sc.obs_times)
    rank = min(2 * n_obs, bases.r_m)
    rows, timing_case = [], None
    for i in idx:
        for j, designs in enumerate(random_designs(sc.bounds, rng, e["compare_designs"])):
            hist, noise = _history(sc, U[i], designs, rng)
            ip = InverseProblem(sc.model, sc.prior, hist, noise)
            mr = ip.compute_map(max_newton=e["map_max_newton"])
            full = ip.laplace_eigs(mr.m, rank, seed=0).d_optimality()
            robs = reduced_observations(bases, sc.grid, sc.dt, hist)
            me = surrogate_map(sur, robs, noise, max_iter=e["lbfgs_max_iter"], history=e["lbfgs_history"])
            smap = d_optimality(reduced_gn_eigs(sur, me.beta, robs, noise))
            proxy = d_optimality(reduced_gn_eigs(sur, ts.beta_m[i], robs, noise, beta_u0=ts.beta_u0[i]))
            truth = d_optimality(np.maximum(dense_sym_eig(reduced_hessian(ts.beta_J[i], robs, noise)).values, 0.0))
            row = {
                "parameter": int(i),
                "design": j,
                "sigma": noise.sigma,
                "full_map": full,
                "surrogate_map": smap,
                "proxy": proxy,
                "projected_truth": truth,
                "full_map_converged": bool(mr.converged),
                "surrogate_map_success": bool(me.success),
            }
            rows.append(row)
            if log is not None:
                log(row)
            if timing_case is None:
                timing_case = (ip, mr.m, me.beta, robs, noise)
    write_csv(out / "compare" / "cases.csv", rows)
    col = {k: np.array([r[k] for r in rows]) for k in ("full_map", "surrogate_map", "proxy", "projected_truth")}

    def pair(a, b):
        return {"correlation": _pearson(col[a], col[b]), "relative_rmse": _rel_rmse(col[a], col[b])}

    body = {
        "n_cases": len(rows),
        "eig_rank": rank,
        "proxy_vs_surrogate_map": pair("proxy", "surrogate_map"),
        "proxy_vs_full_map": pair("proxy", "full_map"),
        "surrogate_map_vs_full_map": pair("surrogate_map", "full_map"),
        "projected_truth_vs_full_map": pair("projected_truth", "full_map"),
        "full_map_converged": int(sum(r["full_map_converged"] for r in rows)),
    }
    # wall-clock comparison on one history; kept out of the metrics file
    ip, m_map, beta, robs, noise = timing_case
    reps = e["timing_repeats"]
    t_full = _median_seconds(lambda: ip.laplace_eigs(m_map, rank, seed=0), reps)
    t_red = _median_seconds(lambda: d_optimality(reduced_gn_eigs(sur, beta, robs, noise)), reps)
    write_json(
        out / "compare" / "timing.json",
        {"full_laplace_seconds": t_full, "reduced_seconds": t_red, "speedup": t_full / t_red, "repeats": reps},
    )
    _write_manifest(out, "compare", cfg, {}, inputs=["surrogate", "data"])
    return _write_metrics(out, "compare", cfg, body)
