"""Command-line interface: one subcommand per pipeline stage.

Every subcommand reads the JSON config (``--config``) plus flag overrides,
writes artifacts under ``--out`` and refreshes ``MANIFEST``. Exit codes:
0 success, 2 usage, 3 invalid config or missing input, 4 artifact already
exists (pass ``--reuse`` or ``--force``), 5 training/evaluation failure.
Failures print a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import diffcore as dc
from .attack import (AttackConfig, AttackDiverged, alpha_label, check_alignment, generate_daes, parse_alpha,
                     train_fixed_noise, train_generator)
from .checkpoint import CheckpointError, load_checkpoint, load_params, save_checkpoint
from .config import ConfigError, canonical, config_hash, load_config
from .datasets import (STYLE_A, STYLE_B, ImageDataset, cifar10_bytes, gen_shapes10, load_cifar10_binary,
                       parse_cifar10_bytes, ppm_bytes, read_ppm)
from .evaluate import (MetricsRecord, TransferTable, accuracy, evaluate_attack, pca_project, retrieval_target_class,
                       retrieval_topk_tfr, train_head)
from .io import atomic_write, write_manifest
from .models import ModelParams, encode
from .pretrain import PretrainConfig, pretrain_encoder
from .report import write_report

log = logging.getLogger("tdaa")

SUBCOMMANDS = {
    "gen-data": "write Shapes10 variants A and B (and cached CIFAR-10) as binary batches",
    "pretrain": "train a victim encoder with one recipe",
    "attack": "train the example-specific perturbation generator",
    "attack-fixed": "train the shared fixed-noise baseline",
    "probe": "train a downstream linear head (optionally fine-tuning the encoder)",
    "eval": "TFR, ATA and distortion of a generator or fixed noise",
    "transfer": "source x target TFR matrix over pretraining recipes",
    "retrieval": "top-k retrieval TFR with the train split as gallery",
    "ablate-alpha": "sweep the tradeoff weight alpha",
    "ablate-criterion": "compare the l2, cosine and infonce feature distances",
    "project": "PCA coordinates of benign and adversarial features",
    "report": "aggregate all metrics records into the report CSV",
}


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **fields):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.fields = fields

    def line(self) -> str:
        return json.dumps({"error": self.kind, "exit": self.code, **self.fields, "message": str(self)},
                          sort_keys=True)


def missing(path) -> CliError:
    return CliError(3, "missing-artifact", f"required artifact not found: {path}", path=str(path))


# ---------------------------------------------------------------- run context


class Context:
    def __init__(self, cfg: dict, out: Path, reuse: bool, force: bool, command: str):
        self.cfg = cfg
        self.out = out
        self.reuse = reuse
        self.force = force
        self.command = command
        self._data = {}

    # artifacts ------------------------------------------------------
    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def exists(self, path: Path) -> bool:
        """True if ``path`` should be reused; raises if it exists without a policy flag."""
        if not path.exists():
            return False
        if self.reuse:
            log.info("reusing %s", path)
            return True
        if self.force:
            return False
        raise CliError(4, "artifact-exists", f"refusing to overwrite {path} (pass --reuse or --force)",
                       path=str(path))

    def write(self, path: Path, data: bytes) -> None:
        atomic_write(path, data)

    def write_json(self, path: Path, obj) -> None:
        self.write(path, (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode())

    def echo_config(self) -> None:
        text = canonical(self.cfg)
        self.write(self.path("config", f"{self.command}-{config_hash(self.cfg)[:12]}.json"), text.encode())

    # data -----------------------------------------------------------
    def dataset(self, name: str, split: str) -> ImageDataset:
        key = (name, split)
        if key in self._data:
            return self._data[key]
        d = self.cfg["data"]
        cached = self.path("data", f"{name}-{split}.bin")
        count = d["train_count"] if split == "train" else d["test_count"]
        if cached.exists():
            ds = parse_cifar10_bytes(cached.read_bytes(), split, source=name)
        elif name == "shapes10":
            ds = gen_shapes10(d["seed"], split, count, STYLE_A, "shapes10")
        elif name == "shapes10b":
            ds = gen_shapes10(d["variant_b_seed"], split, count, STYLE_B, "shapes10b")
        elif name == "cifar10":
            root = d["cifar10_dir"]
            if not root:
                raise CliError(3, "config", "cifar10 requested but data.cifar10_dir is not set",
                               key="data.cifar10_dir")
            files = ([Path(root) / f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train"
                     else [Path(root) / "test_batch.bin"])
            for f in files:
                if not f.exists():
                    raise missing(f)
            ds = load_cifar10_binary(files, split)
        else:
            raise CliError(3, "config", f"unknown dataset {name!r}", key="dataset")
        ds.provenance["name"] = name
        self._data[key] = ds
        return ds

    def threat_image(self, spec: str | None = None) -> torch.Tensor:
        spec = spec or self.cfg["attack"]["threat_image"]
        if spec.lower().endswith(".ppm"):
            if not Path(spec).exists():
                raise missing(spec)
            img = read_ppm(spec)
            if tuple(img.shape) != (3, 32, 32):
                raise CliError(3, "input", f"threat image {spec} must be 32x32", path=spec)
            return img
        try:
            ds_part, idx = spec.rsplit(":", 1)
            idx = int(idx)
            if ds_part.endswith(("-train", "-test")):
                name, split = ds_part.rsplit("-", 1)
            else:
                name, split = ds_part, "train"
        except ValueError:
            raise CliError(3, "config", f"threat image must be <dataset>[-<split>]:<index> or a .ppm path, "
                           f"got {spec!r}", key="attack.threat_image") from None
        ds = self.dataset(name, split)
        if not 0 <= idx < len(ds):
            raise CliError(3, "config", f"threat image index {idx} out of range for {ds_part}",
                           key="attack.threat_image")
        return ds.images[idx]

    # naming ---------------------------------------------------------
    def encoder_path(self, method: str, ft_dataset: str | None = None) -> Path:
        seed = self.cfg["pretrain"]["seed"]
        name = f"{method}-s{seed}" + (f"-ft-{ft_dataset}" if ft_dataset else "")
        return self.path("encoders", name + ".tdac")

    def head_path(self, method: str, dataset: str, finetune: bool) -> Path:
        seed = self.cfg["pretrain"]["seed"]
        return self.path("heads", f"{method}-s{seed}-{dataset}" + ("-ft" if finetune else "") + ".tdac")

    def attack_desc(self, victim=None, criterion=None, alpha=None) -> dict:
        a = self.cfg["attack"]
        return {"victim": victim or a["victim"], "victim_seed": self.cfg["pretrain"]["seed"],
                "criterion": criterion or a["criterion"],
                "alpha": alpha_label(parse_alpha(a["alpha"] if alpha is None else alpha)),
                "epsilon": a["epsilon"], "eta": a["eta"], "lr": a["lr"], "batch_size": a["batch_size"],
                "epochs": a["epochs"], "seed": a["seed"], "attacker_dataset": a["attacker_dataset"],
                "threat_image": a["threat_image"], "infonce_temperature": a["infonce_temperature"]}

    def perturber_path(self, fixed: bool, **kw) -> Path:
        desc = self.attack_desc(**kw)
        stem = f"{desc['victim']}-{desc['criterion']}-a{desc['alpha']}-{config_hash(desc)[:10]}"
        return self.path("noise" if fixed else "generators", stem + ".tdac")

    def load_encoder(self, method: str, ft_dataset: str | None = None) -> ModelParams:
        return load_model(self.encoder_path(method, ft_dataset))

    def attack_config(self, **kw) -> AttackConfig:
        desc = self.attack_desc(**kw)
        return AttackConfig(threat_image=self.threat_image(), alpha=parse_alpha(desc["alpha"]),
                            eps=desc["epsilon"], eta=desc["eta"], criterion=desc["criterion"], lr=desc["lr"],
                            batch_size=desc["batch_size"], epochs=desc["epochs"], seed=desc["seed"],
                            infonce_temperature=desc["infonce_temperature"],
                            attacker_dataset=desc["attacker_dataset"])


def load_model(path: Path) -> ModelParams:
    if not Path(path).exists():
        raise missing(path)
    try:
        params, _ = load_params(path)
    except CheckpointError as exc:
        raise CliError(3, "bad-checkpoint", f"{path}: {exc}", path=str(path)) from None
    return params


def load_perturber(path: Path):
    if not Path(path).exists():
        raise missing(path)
    try:
        tensors, meta = load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(3, "bad-checkpoint", f"{path}: {exc}", path=str(path)) from None
    if "delta" in tensors and len(tensors) == 1:
        return tensors["delta"]
    return ModelParams(meta["arch"], tensors)


# ---------------------------------------------------------------- stages


def cmd_gen_data(ctx: Context, args) -> None:
    d = ctx.cfg["data"]
    for name in ("shapes10", "shapes10b"):
        for split in ("train", "test"):
            target = ctx.path("data", f"{name}-{split}.bin")
            if ctx.exists(target):
                continue
            style = STYLE_A if name == "shapes10" else STYLE_B
            seed = d["seed"] if name == "shapes10" else d["variant_b_seed"]
            count = d["train_count"] if split == "train" else d["test_count"]
            ds = gen_shapes10(seed, split, count, style, name)
            ctx.write(target, cifar10_bytes(ds))
            for i in range(min(d["audit_dumps"], len(ds))):
                ctx.write(ctx.path("data", "audit", f"{name}-{split}-{i:03d}.ppm"), ppm_bytes(ds.images[i]))
            ctx.write_json(ctx.path("data", f"{name}-{split}.json"),
                           {"provenance": ds.provenance, "count": len(ds), "sha256": ds.content_hash(),
                            "class_counts": np.bincount(ds.labels.numpy(), minlength=10).tolist()})


def cmd_pretrain(ctx: Context, args) -> None:
    p = ctx.cfg["pretrain"]
    method = args.method or p["method"]
    target = ctx.encoder_path(method)
    if ctx.exists(target):
        return
    cfg = PretrainConfig(method=method, temperature=p["temperature"], batch_size=p["batch_size"],
                         epochs=p["epochs"], lr=p["lr"], seed=p["seed"], dataset=p["dataset"])
    enc, meta = pretrain_encoder(cfg, ctx.dataset(p["dataset"], "train"))
    meta["config_hash"] = config_hash(p)
    save_checkpoint(enc, meta, target)


def _probe(ctx: Context, method: str, dataset: str, finetune: bool):
    s = ctx.cfg["downstream"]
    head_target = ctx.head_path(method, dataset, finetune)
    enc_target = ctx.encoder_path(method, dataset) if finetune else None
    if ctx.exists(head_target) and (enc_target is None or enc_target.exists()):
        return
    encoder = ctx.load_encoder(method)
    train, test = ctx.dataset(dataset, "train"), ctx.dataset(dataset, "test")
    res = train_head(encoder, train, test, epochs=s["epochs"], lr=s["lr"], finetune=finetune,
                     finetune_lr=s["finetune_lr"], batch_size=s["batch_size"], seed=s["seed"], num_classes=10)
    meta = {"method": method, "dataset": dataset, "finetune": finetune, "seed": s["seed"],
            "train_accuracy": res.train_accuracy, "test_accuracy": res.test_accuracy,
            "epoch_losses": res.epoch_losses, "config_hash": config_hash(s)}
    if finetune:
        save_checkpoint(res.encoder, {**meta, "source_encoder": ctx.encoder_path(method).name}, enc_target)
    save_checkpoint(res.head, meta, head_target)
    log.info("probe %s on %s (finetune=%s): train %.4f test %.4f", method, dataset, finetune,
             res.train_accuracy, res.test_accuracy)


def cmd_probe(ctx: Context, args) -> None:
    s = ctx.cfg["downstream"]
    _probe(ctx, args.victim or ctx.cfg["attack"]["victim"], s["dataset"], s["finetune"])


def _train_perturber(ctx: Context, fixed: bool, **kw) -> Path:
    target = ctx.perturber_path(fixed, **kw)
    if ctx.exists(target):
        return target
    desc = ctx.attack_desc(**kw)
    encoder = ctx.load_encoder(desc["victim"])
    cfg = ctx.attack_config(**kw)
    data = ctx.dataset(desc["attacker_dataset"], "train")
    try:
        if fixed:
            params, history = train_fixed_noise(encoder, cfg, data)
            tensors = {"delta": params}
        else:
            params, history = train_generator(encoder, cfg, data)
            tensors = params
    except AttackDiverged as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, {"attack": desc, "diverged": True},
                            target.with_suffix(".last-good.tdac"))
        raise
    ck_meta = {"attack": desc, "kind": "fixed-noise" if fixed else "generator",
               "final_feature_distance": history["epoch_feature_distance"][-1]}
    if not fixed:
        ck_meta["arch"] = params.arch
    save_checkpoint(tensors, ck_meta, target)
    ctx.write_json(target.with_suffix(".log.json"), {"attack": desc, **history})
    return target


def cmd_attack(ctx: Context, args) -> None:
    _train_perturber(ctx, fixed=False)


def cmd_attack_fixed(ctx: Context, args) -> None:
    _train_perturber(ctx, fixed=True)


def _experiment_id(kind: str, desc: dict, downstream: str, finetune: bool) -> str:
    ft = "-ft" if finetune else ""
    return (f"{kind}-{desc['victim']}-{desc['criterion']}-a{desc['alpha']}-"
            f"{desc['attacker_dataset']}-to-{downstream}{ft}")


def _evaluate(ctx: Context, fixed: bool, perturber_path: Path | None = None, target_method: str | None = None,
              experiment_id: str | None = None, dump: bool = False, **kw) -> MetricsRecord:
    s = ctx.cfg["downstream"]
    desc = ctx.attack_desc(**kw)
    downstream, finetune = s["dataset"], s["finetune"]
    method = target_method or desc["victim"]
    exp_id = experiment_id or _experiment_id("fixed" if fixed else "gen", desc, downstream, finetune)
    metrics_path = ctx.path("metrics", exp_id + ".json")
    if ctx.exists(metrics_path):
        return MetricsRecord.from_dict(json.loads(metrics_path.read_text()))
    perturber = load_perturber(perturber_path or ctx.perturber_path(fixed, **kw))
    encoder = load_model(ctx.encoder_path(method, downstream if finetune else None))
    head = load_model(ctx.head_path(method, downstream, finetune))
    test = ctx.dataset(downstream, "test")
    x_t = ctx.threat_image()
    ev = evaluate_attack(encoder, head, perturber, test, x_t, desc["epsilon"], ctx.cfg["eval"]["batch_size"])
    if ev.max_linf > desc["epsilon"] + 1e-6:
        raise CliError(5, "budget-violation", f"{exp_id}: l-inf distortion {ev.max_linf} exceeds epsilon")
    dist, within = check_alignment(encoder, ev.daes, x_t, desc["eta"])
    record = MetricsRecord(exp_id, desc["attacker_dataset"], downstream, method, desc["criterion"], desc["alpha"],
                           desc["epsilon"], desc["seed"], ev.y_t, ev.tfr, ev.ata, ev.mean_l2, ev.mean_linf,
                           extra={"source_victim": desc["victim"], "finetune": finetune,
                                  "perturber": "fixed-noise" if fixed else "generator",
                                  "mean_feature_distance": float(dist.mean()), "fraction_within_eta": within,
                                  "clean_accuracy": accuracy(encoder, head, test)})
    ctx.write_json(metrics_path, record.to_dict())
    if dump:
        for i in range(ctx.cfg["eval"]["dump_count"]):
            ctx.write(ctx.path("dumps", exp_id, f"{i:03d}-benign.ppm"), ppm_bytes(test.images[i]))
            ctx.write(ctx.path("dumps", exp_id, f"{i:03d}-adv.ppm"), ppm_bytes(ev.daes[i]))
        ctx.write(ctx.path("dumps", exp_id, "threat.ppm"), ppm_bytes(x_t))
    log.info("%s: y_t=%d TFR=%.4f ATA=%.4f l2=%.4f", exp_id, ev.y_t, ev.tfr, ev.ata, ev.mean_l2)
    return record


def cmd_eval(ctx: Context, args) -> None:
    path = Path(args.generator) if args.generator else None
    _evaluate(ctx, fixed=args.fixed, perturber_path=path, dump=True)


def cmd_transfer(ctx: Context, args) -> None:
    methods = ctx.cfg["eval"]["transfer_methods"]
    s = ctx.cfg["downstream"]
    table = np.zeros((len(methods), len(methods)))
    for i, src in enumerate(methods):
        gen_path = _train_perturber(ctx, fixed=False, victim=src)
        for j, tgt in enumerate(methods):
            desc = ctx.attack_desc(victim=src)
            exp_id = f"transfer-{src}-to-{tgt}-{desc['criterion']}-a{desc['alpha']}-{s['dataset']}"
            rec = _evaluate(ctx, fixed=False, perturber_path=gen_path, target_method=tgt,
                            experiment_id=exp_id, victim=src)
            table[i, j] = rec.tfr
    tt = TransferTable(list(methods), list(methods), table)
    target = ctx.path("transfer.csv")
    if not ctx.exists(target):
        ctx.write(target, tt.to_csv().encode())
    log.info("transfer off-diagonal mean TFR %.4f", tt.off_diagonal_mean())


def cmd_retrieval(ctx: Context, args) -> None:
    s, e = ctx.cfg["downstream"], ctx.cfg["eval"]
    desc = ctx.attack_desc()
    exp_id = f"retrieval-{desc['victim']}-{desc['criterion']}-a{desc['alpha']}-{desc['attacker_dataset']}-to-{s['dataset']}"
    metrics_path = ctx.path("metrics", exp_id + ".json")
    if ctx.exists(metrics_path):
        return
    encoder = ctx.load_encoder(desc["victim"])
    gen = load_perturber(ctx.perturber_path(False))
    gallery, queries = ctx.dataset(s["dataset"], "train"), ctx.dataset(s["dataset"], "test")
    x_t = ctx.threat_image()
    gf = encode(encoder, gallery.images).numpy()
    y_t = retrieval_target_class(gf, gallery.labels.numpy(), encode(encoder, x_t[None])[0].numpy(), e["retrieval_k"])
    daes = generate_daes(gen, queries.images, desc["epsilon"], e["batch_size"])
    res = retrieval_topk_tfr(gf, gallery.labels.numpy(), encode(encoder, daes).numpy(), y_t, e["retrieval_k"],
                             query_labels=queries.labels.numpy())
    diff = (daes - queries.images).reshape(len(queries), -1).double()
    record = MetricsRecord(exp_id, desc["attacker_dataset"], s["dataset"] + "-retrieval", desc["victim"],
                           desc["criterion"], desc["alpha"], desc["epsilon"], desc["seed"], y_t, res.topk_tfr,
                           res.benign_majority_accuracy, float(dc.l2_norm(diff, 1).mean()),
                           float(diff.abs().max(dim=1).values.mean()),
                           extra={"k": e["retrieval_k"], "mean_target_fraction": res.mean_target_fraction})
    ctx.write_json(metrics_path, record.to_dict())
    log.info("%s: top-%d TFR %.4f (mean target fraction %.4f)", exp_id, e["retrieval_k"], res.topk_tfr,
             res.mean_target_fraction)


def cmd_ablate_alpha(ctx: Context, args) -> None:
    rows = []
    for alpha in ctx.cfg["eval"]["alpha_grid"]:
        path = _train_perturber(ctx, fixed=False, alpha=alpha)
        rec = _evaluate(ctx, fixed=False, perturber_path=path, alpha=alpha)
        rows.append(rec)
    target = ctx.path("ablations", "alpha.csv")
    if not ctx.exists(target):
        lines = ["alpha,tfr,ata,mean_l2,mean_linf"] + [
            f"{r.alpha},{r.tfr:.6f},{r.ata:.6f},{r.mean_l2:.6f},{r.mean_linf:.6f}" for r in rows]
        ctx.write(target, ("\n".join(lines) + "\n").encode())


def cmd_ablate_criterion(ctx: Context, args) -> None:
    rows = []
    for crit in ctx.cfg["eval"]["criteria"]:
        path = _train_perturber(ctx, fixed=False, criterion=crit)
        rows.append(_evaluate(ctx, fixed=False, perturber_path=path, criterion=crit))
    best = max(r.tfr for r in rows)
    l2 = [r for r in rows if r.criterion == "l2"]
    warning = None
    if l2 and l2[0].tfr < best:
        warning = (f"expected-outcome warning: l2 TFR {l2[0].tfr:.4f} is not the maximum "
                   f"({best:.4f}) across criteria")
        print(json.dumps({"warning": "criterion-ablation", "message": warning}), file=sys.stderr)
    target = ctx.path("ablations", "criterion.csv")
    if not ctx.exists(target):
        lines = ["criterion,tfr,ata,mean_l2,mean_linf"] + [
            f"{r.criterion},{r.tfr:.6f},{r.ata:.6f},{r.mean_l2:.6f},{r.mean_linf:.6f}" for r in rows]
        ctx.write(target, ("\n".join(lines) + "\n").encode())


def cmd_project(ctx: Context, args) -> None:
    s, e = ctx.cfg["downstream"], ctx.cfg["eval"]
    desc = ctx.attack_desc()
    exp_id = _experiment_id("gen", desc, s["dataset"], False)
    target = ctx.path("projection", exp_id + ".csv")
    if ctx.exists(target):
        return
    encoder = ctx.load_encoder(desc["victim"])
    gen = load_perturber(ctx.perturber_path(False))
    test = ctx.dataset(s["dataset"], "test")
    n = min(e["project_count"], len(test))
    x = test.images[:n]
    daes = generate_daes(gen, x, desc["epsilon"], e["batch_size"])
    feats = torch.cat([encode(encoder, x), encode(encoder, daes)]).numpy()
    pca = pca_project(feats)
    labels = test.labels[:n].numpy()
    lines = ["id,x,y,label,is_adversarial"]
    for i in range(2 * n):
        lines.append(f"{i % n},{pca.coords[i, 0]:.6f},{pca.coords[i, 1]:.6f},{labels[i % n]},{int(i >= n)}")
    ctx.write(target, ("\n".join(lines) + "\n").encode())
    ctx.write_json(target.with_suffix(".json"),
                   {"explained_variance": list(pca.explained_variance), "total_variance": pca.total_variance})


def cmd_report(ctx: Context, args) -> None:
    target = ctx.path(ctx.cfg["output"]["report"])
    if ctx.exists(target):
        return
    files = sorted(ctx.path("metrics").glob("*.json")) if ctx.path("metrics").exists() else []
    records = [MetricsRecord.from_dict(json.loads(f.read_text())) for f in files]
    if not records:
        raise CliError(3, "missing-artifact", f"no metrics records under {ctx.path('metrics')}",
                       path=str(ctx.path("metrics")))
    write_report(records, target)


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "attack": cmd_attack, "attack-fixed": cmd_attack_fixed,
    "probe": cmd_probe, "eval": cmd_eval, "transfer": cmd_transfer, "retrieval": cmd_retrieval,
    "ablate-alpha": cmd_ablate_alpha, "ablate-criterion": cmd_ablate_criterion, "project": cmd_project,
    "report": cmd_report,
}


# ---------------------------------------------------------------- argv


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdaa", description="Targeted downstream-agnostic attack lab")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True
    for name, text in SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", default="out", help="artifact directory (default: out)")
        sp.add_argument("--seed", type=int, help="override the seed of this stage")
        policy = sp.add_mutually_exclusive_group()
        policy.add_argument("--reuse", action="store_true", help="reuse existing artifacts")
        policy.add_argument("--force", action="store_true", help="recompute and replace existing artifacts")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "pretrain":
            sp.add_argument("--method", help="pretraining recipe")
        if name in ("attack", "attack-fixed", "probe", "eval", "retrieval", "ablate-alpha",
                    "ablate-criterion", "project", "transfer"):
            sp.add_argument("--victim", help="victim encoder recipe")
            sp.add_argument("--alpha", help="tradeoff weight (number or inf)")
            sp.add_argument("--epsilon", type=float, help="l-inf budget in image units")
            sp.add_argument("--criterion", help="feature distance: l2, cosine or infonce")
            sp.add_argument("--threat-image", help="<dataset>-<split>:<index> or a .ppm path")
            sp.add_argument("--attacker-dataset", help="attacker dataset D_a")
            sp.add_argument("--dataset", help="downstream dataset D_d")
            sp.add_argument("--finetune", action="store_true", help="use the fine-tuned encoder and head")
        if name == "eval":
            sp.add_argument("--generator", help="explicit generator or fixed-noise checkpoint")
            sp.add_argument("--fixed", action="store_true", help="evaluate the fixed-noise baseline")
    return parser


_SEED_KEYS = {"gen-data": ("data", "seed"), "pretrain": ("pretrain", "seed"), "probe": ("downstream", "seed")}


def _overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    if args.seed is not None:
        section, key = _SEED_KEYS.get(args.command, ("attack", "seed"))
        put(section, key, args.seed)
    put("pretrain", "method", getattr(args, "method", None))
    put("attack", "victim", getattr(args, "victim", None))
    alpha = getattr(args, "alpha", None)
    if alpha is not None:
        try:
            alpha = "inf" if math.isinf(parse_alpha(alpha)) else parse_alpha(alpha)
        except ValueError:
            raise ConfigError("--alpha", f"not a number: {alpha!r}") from None
    put("attack", "alpha", alpha)
    put("attack", "epsilon", getattr(args, "epsilon", None))
    put("attack", "criterion", getattr(args, "criterion", None))
    put("attack", "threat_image", getattr(args, "threat_image", None))
    put("attack", "attacker_dataset", getattr(args, "attacker_dataset", None))
    put("downstream", "dataset", getattr(args, "dataset", None))
    if getattr(args, "finetune", False):
        put("downstream", "finetune", True)
    return o


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    dc.configure_threads()
    try:
        cfg = load_config(args.config, _overrides(args))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ctx = Context(cfg, out, args.reuse, args.force, args.command)
        ctx.echo_config()
        HANDLERS[args.command](ctx, args)
        write_manifest(out)
    except ConfigError as exc:
        err = CliError(3, "config", exc.message, key=exc.key)
        print(err.line(), file=sys.stderr)
        return 3
    except CliError as exc:
        print(exc.line(), file=sys.stderr)
        return exc.code
    except (dc.NonFiniteError, RuntimeError, ValueError) as exc:
        err = CliError(5, "failure", f"{type(exc).__name__}: {exc}")
        print(err.line(), file=sys.stderr)
        return 5
    return 0


def main() -> None:
    sys.exit(run())
