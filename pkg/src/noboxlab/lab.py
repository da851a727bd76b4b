"""Run orchestration for noboxlab."""

from __future__ import annotations

import json
import logging
import os
from collections.abc import Callable, Collection
from dataclasses import replace
from datetime import datetime, timezone

UTC = timezone.utc
from pathlib import Path
from typing import Any

import torch

from noboxlab.anchors import build_anchor_set
from noboxlab.attacks import Attacker, adversarial_train, pgd_attacker, train_target
from noboxlab.config import RunSettings, require
from noboxlab.data import (
    SplitRegistry,
    TensorBatchSource,
    build_split_registry,
    load_assignment,
    load_manifest,
    role_items,
    subsample_per_class,
    verify_disjointness,
)
from noboxlab.evaluation import evaluate, generator_attacker, render_report
from noboxlab.exceptions import (
    ConfigError,
    DisjointnessError,
    PersistenceError,
    RoleNotFoundError,
    RunExistsError,
)
from noboxlab.generator import (
    GeneratorModel,
    GeneratorSpec,
    build_generator,
    craft_adversarial,
    dump_adversarial,
    train_generator,
)
from noboxlab.geometry import class_margin_audit, export_embeddings
from noboxlab.margin import finetune_surrogate
from noboxlab.models import (
    DatasetManifest,
    DisjointnessVerdict,
    EmbeddingBatch,
    EvaluationReport,
    LabelVector,
    PgdConfig,
    RunManifest,
    TrainingTrace,
    utcnow,
)
from noboxlab.synth import write_toy_dataset
from noboxlab.training import evaluating, seed_everything
from noboxlab.zoo import (
    EncoderSpec,
    SurrogateModel,
    TargetModel,
    TargetSpec,
    build_surrogate,
    persist_checkpoint,
    restore_checkpoint,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

COMMANDS = (
    "synth",
    "finetune",
    "train-gen",
    "attack",
    "eval",
    "train-target",
    "adv-train",
    "audit",
    "export-emb",
    "pipeline",
    "compare-surrogates",
    "ablate-proportion",
)

SURROGATE_VARIANTS = ("vanilla", "plain", "margin")


class Lab:
    """Executes one command inside its own run directory and keeps its manifest."""

    def __init__(self, settings: RunSettings, command: str) -> None:
        """
        Prepare a run.

        Args:
            settings: Validated run configuration (see noboxlab.config.load_config)
            command: One of COMMANDS
        """
        from noboxlab import __version__

        if command not in COMMANDS:
            raise ConfigError("command", f"unknown command {command!r}")
        unknown = [v for v in settings.compare.variants if v not in SURROGATE_VARIANTS]
        if command == "compare-surrogates" and unknown:
            raise ConfigError("compare.variants", f"unknown variants {unknown}")

        self._settings = settings
        self._command = command
        self._config_hash = settings.config_hash()
        self._device = torch.device(settings.runtime.device)
        self._dataset: DatasetManifest | None = None
        self._assignment: dict[str, str] | None = None
        self._registry: SplitRegistry | None = None
        self._sources: dict[str, TensorBatchSource] = {}
        self._log_handler: logging.Handler | None = None
        self.run_dir: Path | None = None
        stamp = datetime.now(UTC).strftime("%Y%m%dT%H%M%SZ")
        self.manifest = RunManifest(
            run_id=f"{command}-{stamp}-{self._config_hash[:8]}",
            command=command,
            config_hash=self._config_hash,
            seed=settings.seed,
            tool_version=__version__,
        )

    # --- lifecycle ---------------------------------------------------------------------------

    def open(self) -> Path:
        """Create the run directory, attach the run log and seed every RNG."""
        run_dir = self._settings.output_root / self.manifest.run_id
        try:
            run_dir.mkdir(parents=True, exist_ok=False)
        except FileExistsError as exc:
            raise RunExistsError(f"run directory {run_dir} already exists") from exc
        self.run_dir = run_dir

        package_logger = logging.getLogger("noboxlab")
        if package_logger.level == logging.NOTSET:
            package_logger.setLevel(logging.INFO)
        handler = logging.FileHandler(run_dir / "run.log", encoding="utf-8")
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        package_logger.addHandler(handler)
        self._log_handler = handler
        self.manifest.add_artifact("log", run_dir / "run.log")

        seed_everything(self._settings.seed)
        logger.info("run %s (config %s)", self.manifest.run_id, self._config_hash)
        return run_dir

    def close(self, status: str = "ok", error: str | None = None) -> None:
        """Finish the manifest and write it next to the artifacts."""
        self.manifest.status = status  # type: ignore[assignment]
        self.manifest.error = error
        self.manifest.finished_at = utcnow()
        if self.run_dir is not None:
            path = self.run_dir / "manifest.json"
            tmp = path.with_name(path.name + ".tmp")
            try:
                tmp.write_text(json.dumps(self.manifest.to_dict(), indent=2) + "\n")
                os.replace(tmp, path)
            except OSError as exc:
                raise PersistenceError(f"cannot write run manifest {path}: {exc}") from exc
            logger.info("run %s finished: %s", self.manifest.run_id, status)
        if self._log_handler is not None:
            logging.getLogger("noboxlab").removeHandler(self._log_handler)
            self._log_handler.close()
            self._log_handler = None

    def __enter__(self) -> Lab:
        self.open()
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        if exc_val is None:
            self.close("ok")
        else:
            logger.error("run %s failed: %s", self.manifest.run_id, exc_val)
            self.close("failed", f"{type(exc_val).__name__}: {exc_val}")

    def execute(self) -> RunManifest:
        """Run the command; requires an open run directory."""
        if self.run_dir is None:
            raise RuntimeError("Run not open. Call open() or use 'with Lab(...)'.")
        handlers: dict[str, Callable[[], object]] = {
            "synth": self._cmd_synth,
            "finetune": self._cmd_finetune,
            "train-gen": self._cmd_train_gen,
            "attack": self._cmd_attack,
            "eval": self._cmd_eval,
            "train-target": lambda: self.train_target(robust=False),
            "adv-train": lambda: self.train_target(robust=True),
            "audit": self._cmd_audit,
            "export-emb": self._cmd_export_emb,
            "pipeline": self._cmd_pipeline,
            "compare-surrogates": self._cmd_compare_surrogates,
            "ablate-proportion": self._cmd_ablate_proportion,
        }
        handlers[self._command]()
        return self.manifest

    # --- plan --------------------------------------------------------------------------------

    def plan(self) -> list[str]:
        """Human-readable steps the command would run."""
        s = self._settings
        roles = s.roles
        tune = f"fine-tune surrogate on role {roles.tune!r} ({s.finetune.epochs} epochs)"
        gen = (
            f"train generator against the surrogate (eps={s.budget.epsilon}, "
            f"{s.generator.epochs} epochs)"
        )
        if s.target.checkpoints:
            targets = [f"restore target {p}" for p in s.target.checkpoints]
        else:
            targets = [f"train standard target on role {roles.target_train!r}"]
            if s.target.robust:
                targets.append(f"adversarially train target on role {roles.target_train!r}")
        check = f"verify {roles.tune!r} / {roles.target_train!r} disjointness"
        evaluate_step = f"evaluate on role {roles.eval!r} and render the ASR table"

        if self._command == "synth":
            return [f"write toy dataset {s.synth.name!r} to {s.synth.root}"]
        if self._command == "finetune":
            return [check, f"{tune} with m={s.margin.m}", "save surrogate checkpoint and trace"]
        if self._command == "train-gen":
            return [check, f"restore surrogate {s.surrogate.checkpoint}", gen]
        if self._command == "attack":
            return [f"restore generator {s.generator.checkpoint}", "craft and dump eval role"]
        if self._command == "eval":
            return [f"restore generator {s.generator.checkpoint}", *targets, evaluate_step]
        if self._command == "train-target":
            return [f"train standard target on role {roles.target_train!r}"]
        if self._command == "adv-train":
            return [f"adversarially train target on role {roles.target_train!r}"]
        if self._command in ("audit", "export-emb"):
            return [f"restore surrogate {s.surrogate.checkpoint}", f"{self._command} embeddings"]
        if self._command == "pipeline":
            return [check, f"{tune} with m={s.margin.m}", *targets, gen, evaluate_step]
        if self._command == "compare-surrogates":
            steps = [check, *targets]
            for variant in s.compare.variants:
                steps += [f"[{variant}] {tune}", f"[{variant}] {gen}"]
            return [*steps, evaluate_step]
        steps = [check, *targets]
        for p in s.ablation.proportions:
            steps += [f"[{_percent(p)}] {tune}", f"[{_percent(p)}] {gen}"]
        return [*steps, evaluate_step]

    # --- data --------------------------------------------------------------------------------

    @property
    def dataset(self) -> DatasetManifest:
        if self._dataset is None:
            assert self._settings.data.manifest is not None
            self._dataset = load_manifest(self._settings.data.manifest)
        return self._dataset

    @property
    def assignment(self) -> dict[str, str]:
        if self._assignment is None:
            assert self._settings.data.assignment is not None
            self._assignment = load_assignment(self._settings.data.assignment)
        return self._assignment

    def registry(self) -> SplitRegistry:
        """Content hashes of every role, built once per run and saved with it."""
        if self._registry is None:
            self._registry = build_split_registry(
                self.dataset, self.assignment, workers=self._settings.data.workers
            )
            self.manifest.add_artifact("registry", self._registry.save(self._path("splits.txt")))
        return self._registry

    def source(self, role: str, batch_size: int, *, shuffle: bool = True) -> TensorBatchSource:
        """Batches of a role; shuffled per epoch from the run seed unless `shuffle` is off."""
        if role not in self._sources:
            if not role_items(self.assignment, role):
                raise RoleNotFoundError(role, sorted(set(self.assignment.values())))
            self._sources[role] = TensorBatchSource.from_manifest(
                self.dataset,
                [role],
                assignment=self.assignment,
                workers=self._settings.data.workers,
            )
        base = self._sources[role]
        seed = self._settings.seed if shuffle else None
        return TensorBatchSource(base.pixels, base.labels, base.ids, batch_size, seed)

    def verify(
        self, role_a: str, role_b: str, *, required: bool = True, missing_ok: bool = False
    ) -> DisjointnessVerdict:
        """Compare two roles and record the verdict; a required pair must be disjoint.

        With `missing_ok`, an unregistered `role_b` passes and the verdict notes its absence.
        """
        registry = self.registry()
        if missing_ok and role_b not in registry.roles:
            logger.info("role %r is not registered; nothing to check against %r", role_b, role_a)
            verdict = DisjointnessVerdict(role_a, role_b, note=f"role {role_b!r} not registered")
        else:
            verdict = verify_disjointness(registry, role_a, role_b)
        self.manifest.disjointness[f"{role_a}|{role_b}"] = verdict.to_dict()
        if not verdict.passed:
            if required:
                raise DisjointnessError(role_a, role_b, verdict.offending)
            logger.warning(
                "roles %r and %r share %d images", role_a, role_b, len(verdict.offending)
            )
        return verdict

    def flags(self) -> tuple[str, ...]:
        roles = self._settings.roles
        overlap = roles.tune == roles.eval
        if not overlap:
            overlap = not self.verify(roles.tune, roles.eval, required=False).passed
        if overlap:
            logger.warning(
                "surrogate-tune role %r overlaps eval role %r; reports are flagged",
                roles.tune,
                roles.eval,
            )
            return ("tune-eval-overlap",)
        return ()

    # --- artifacts ---------------------------------------------------------------------------

    def _path(self, name: str) -> Path:
        if self.run_dir is None:
            raise RuntimeError("Run not open. Call open() or use 'with Lab(...)'.")
        return self.run_dir / name

    def _save_model(self, model: Any, stem: str, kind: str = "checkpoint") -> Path:
        path = persist_checkpoint(model, self._path(f"{stem}.pt"), config_hash=self._config_hash)
        model.metadata["name"] = stem
        self.manifest.add_artifact(kind, path)
        return path

    def _save_trace(self, trace: TrainingTrace, stem: str, kind: str = "trace") -> Path:
        path = trace.write_csv(self._path(f"{stem}_trace.csv"))
        self.manifest.add_artifact(kind, path)
        return path

    def _restore(self, path: Path | None, key: str) -> Any:
        if path is None:
            raise ConfigError(key, f"required by '{self._command}'")
        model = restore_checkpoint(path)
        model.metadata["name"] = Path(path).stem
        return model.to(self._device)

    def _write_report(self, reports: list[EvaluationReport], name: str = "report.txt") -> Path:
        path = render_report(reports, self._path(name))
        self.manifest.add_artifact("report", path)
        self.manifest.add_artifact("report-json", path.with_suffix(".json"))
        return path

    # --- stages ------------------------------------------------------------------------------

    def encoder_spec(self) -> EncoderSpec:
        enc = self._settings.encoder
        return EncoderSpec(
            kind=enc.kind,
            emb_dim=enc.emb_dim,
            input_size=self.dataset.image_size,
            plugin_ref=enc.plugin_ref,
            width=enc.width,
        )

    def finetune(
        self,
        variant: str = "margin",
        *,
        tune_ids: Collection[str] | None = None,
        tag: str = "surrogate",
    ) -> SurrogateModel:
        """Stage 1: fine-tune a fresh surrogate on the tune role.

        `plain` sets m=0; `vanilla` also freezes the encoder and trains the head only.
        """
        s = self._settings
        roles = s.roles
        self.verify(roles.tune, roles.target_train, missing_ok=True)
        cfg = s.margin.to_config()
        freeze = s.encoder.freeze
        if variant in ("vanilla", "plain"):
            cfg = replace(cfg, m=0.0)
        if variant == "vanilla":
            freeze = True

        model = build_surrogate(
            self.encoder_spec(), self.dataset.n_classes, seed=s.seed, logit_scale=cfg.s
        )
        if s.anchors.provider != "head-weights":
            model.load_anchors(build_anchor_set(s.anchors, model))
        model.to(self._device)

        data = self.source(roles.tune, s.finetune.batch_size)
        if tune_ids is not None:
            data = data.subset(tune_ids)
        model, trace = finetune_surrogate(
            model,
            data,
            s.finetune.to_schedule(s.seed),
            cfg,
            registry=self.registry(),
            tune_role=roles.tune,
            protected_roles=(roles.target_train,),
            freeze_encoder=freeze,
            config_hash=self._config_hash,
            progress=s.runtime.progress,
        )
        model.metadata["extra"]["variant"] = variant
        logger.info(
            "surrogate %s: min margin %s -> %s",
            tag,
            trace.baseline_min_margin,
            trace.records[-1].min_margin if trace.records else None,
        )
        self._save_model(model, tag)
        self._save_trace(trace, tag)
        return model

    def train_gen(
        self,
        surrogate: SurrogateModel,
        *,
        data: TensorBatchSource | None = None,
        tag: str = "generator",
    ) -> GeneratorModel:
        """Stage 2: train a generator against a frozen surrogate."""
        s = self._settings
        self.verify(s.roles.tune, s.roles.target_train, missing_ok=True)
        g = s.generator
        spec = GeneratorSpec(
            channels=self.dataset.image_size[2],
            depth=g.depth,
            width=g.width,
            res_blocks=g.res_blocks,
        )
        generator = build_generator(spec, seed=s.seed).to(self._device)
        if data is None:
            data = self.source(s.roles.tune, g.batch_size)
        generator, trace = train_generator(
            generator,
            surrogate.to(self._device),
            data.with_batch_size(g.batch_size),
            g.to_schedule(s.seed),
            s.budget.to_budget(),
            config_hash=self._config_hash,
            progress=s.runtime.progress,
        )
        self._save_model(generator, tag)
        self._save_trace(trace, tag)
        return generator

    def pgd_config(self, *, for_training: bool) -> PgdConfig:
        """PGD settings; the epsilon falls back to the attack budget."""
        pgd = self._settings.pgd
        if pgd.epsilon is None and self._settings.budget.epsilon is not None:
            pgd = pgd.model_copy(update={"epsilon": self._settings.budget.epsilon})
        return pgd.to_config(for_training=for_training)

    def train_target(self, *, robust: bool) -> TargetModel:
        s = self._settings
        t = s.target
        spec = TargetSpec(
            arch=t.arch,
            n_classes=self.dataset.n_classes,
            input_size=self.dataset.image_size,
            width=t.width,
        )
        data = self.source(s.roles.target_train, t.batch_size)
        sched = t.to_schedule(s.seed)
        if robust:
            model, trace = adversarial_train(
                spec,
                data,
                self.pgd_config(for_training=True),
                sched,
                mix_ratio=s.pgd.mix_ratio,
                device=self._device,
                config_hash=self._config_hash,
                progress=s.runtime.progress,
            )
            tag = "target-robust"
        else:
            model, trace = train_target(
                spec,
                data,
                sched,
                device=self._device,
                config_hash=self._config_hash,
                progress=s.runtime.progress,
            )
            tag = "target-standard"
        kind = "checkpoint" if self._command in ("train-target", "adv-train") else "target"
        self._save_model(model, tag, kind=kind)
        self._save_trace(trace, tag, kind="trace" if kind == "checkpoint" else "target-trace")
        return model

    def targets(self) -> list[TargetModel]:
        """Configured target checkpoints, or targets trained in this run on the target role."""
        s = self._settings
        if s.target.checkpoints:
            return [self._restore(p, "target.checkpoints") for p in s.target.checkpoints]
        models = [self.train_target(robust=False)]
        if s.target.robust:
            models.append(self.train_target(robust=True))
        return models

    def evaluate_all(
        self,
        attackers: list[tuple[str, Attacker]],
        targets: list[TargetModel],
        dataset: str | None = None,
    ) -> list[EvaluationReport]:
        """Every attacker against every target on the eval role, in stored order."""
        s = self._settings
        self.verify(s.roles.eval, s.roles.target_train, required=False, missing_ok=True)
        data = self.source(s.roles.eval, s.generator.batch_size, shuffle=False)
        flags = self.flags()
        budget = s.budget.to_budget()
        return [
            evaluate(
                target,
                attacker,
                data,
                budget,
                dataset=dataset or self.dataset.name,
                attacker_id=attacker_id,
                target_id=target.metadata.get("name"),
                seed=s.seed,
                flags=flags,
            )
            for target in targets
            for attacker_id, attacker in attackers
        ]

    # --- commands ----------------------------------------------------------------------------

    def _cmd_synth(self) -> None:
        syn = self._settings.synth
        assert syn.root is not None
        manifest, assignment = write_toy_dataset(
            syn.root,
            name=syn.name,
            n_classes=syn.n_classes,
            per_class=syn.per_class,
            size=syn.size,
            seed=self._settings.seed,
            channels=syn.channels,
        )
        self.manifest.add_artifact("dataset", manifest)
        self.manifest.add_artifact("assignment", assignment)

    def _cmd_finetune(self) -> None:
        self.finetune("margin")

    def _cmd_train_gen(self) -> None:
        surrogate = self._restore(self._settings.surrogate.checkpoint, "surrogate.checkpoint")
        self.train_gen(surrogate)

    def _cmd_attack(self) -> None:
        s = self._settings
        generator = self._restore(s.generator.checkpoint, "generator.checkpoint")
        budget = s.budget.to_budget()
        data = self.source(s.roles.eval, s.generator.batch_size, shuffle=False)
        crafted = (craft_adversarial(generator, batch, budget) for batch, _ in data.batches())
        manifest_path = dump_adversarial(crafted, self._path("adversarial"))
        self.manifest.add_artifact("adversarial", manifest_path)

    def _cmd_eval(self) -> None:
        s = self._settings
        generator = self._restore(s.generator.checkpoint, "generator.checkpoint")
        attackers: list[tuple[str, Attacker]] = [
            ("generator", generator_attacker(generator, s.budget.to_budget()))
        ]
        if s.surrogate.checkpoint is not None:
            surrogate = self._restore(s.surrogate.checkpoint, "surrogate.checkpoint")
            attackers.append(
                ("pgd-transfer", pgd_attacker(surrogate, self.pgd_config(for_training=False)))
            )
        self._write_report(self.evaluate_all(attackers, self.targets()))

    def _embeddings(
        self, role: str
    ) -> tuple[SurrogateModel, EmbeddingBatch, LabelVector, list[str]]:
        s = self._settings
        surrogate = self._restore(s.surrogate.checkpoint, "surrogate.checkpoint")
        vectors, labels, ids = [], [], []
        with evaluating(surrogate), torch.no_grad():
            for batch, y in self.source(role, s.finetune.batch_size, shuffle=False).batches():
                vectors.append(surrogate.embed(batch.pixels.to(self._device)).cpu())
                labels.append(y.labels)
                ids += batch.ids
        embs = EmbeddingBatch.normalized(torch.cat(vectors))
        return surrogate, embs, LabelVector(torch.cat(labels)), ids

    def _cmd_audit(self) -> None:
        surrogate, embs, labels, _ = self._embeddings(self._settings.roles.tune)
        anchors = build_anchor_set(self._settings.anchors, surrogate)
        audit = class_margin_audit(embs, labels, anchors)
        path = self._path("margin_audit.json")
        path.write_text(json.dumps(audit.to_dict(), indent=2) + "\n", encoding="utf-8")
        logger.info("overall min margin %.6f", audit.min_margin)
        self.manifest.add_artifact("audit", path)

    def _cmd_export_emb(self) -> None:
        _, embs, labels, ids = self._embeddings(self._settings.roles.eval)
        path = export_embeddings(embs, labels, ids, self._path("embeddings.csv"))
        self.manifest.add_artifact("embeddings", path)

    def _cmd_pipeline(self) -> None:
        surrogate = self.finetune("margin")
        targets = self.targets()
        generator = self.train_gen(surrogate)
        attacker = generator_attacker(generator, self._settings.budget.to_budget())
        self._write_report(self.evaluate_all([("generator", attacker)], targets))

    def _cmd_compare_surrogates(self) -> None:
        targets = self.targets()
        budget = self._settings.budget.to_budget()
        reports: list[EvaluationReport] = []
        for variant in self._settings.compare.variants:
            surrogate = self.finetune(variant, tag=f"surrogate-{variant}")
            generator = self.train_gen(surrogate, tag=f"generator-{variant}")
            attacker = generator_attacker(generator, budget)
            reports += self.evaluate_all([(f"generator[{variant}]", attacker)], targets)
        self._write_report(reports)

    def _cmd_ablate_proportion(self) -> None:
        s = self._settings
        targets = self.targets()
        budget = s.budget.to_budget()
        tune_items = [self.dataset.item(i) for i in role_items(self.assignment, s.roles.tune)]
        reports: list[EvaluationReport] = []
        for proportion in s.ablation.proportions:
            label = _percent(proportion)
            kept = [i.item_id for i in subsample_per_class(tune_items, proportion, s.seed)]
            logger.info("proportion %s: %d tune images", label, len(kept))
            tag = f"p{round(proportion * 100):03d}"
            surrogate = self.finetune("margin", tune_ids=kept, tag=f"surrogate-{tag}")
            data = self.source(s.roles.tune, s.generator.batch_size).subset(kept)
            generator = self.train_gen(surrogate, data=data, tag=f"generator-{tag}")
            reports += self.evaluate_all(
                [("generator", generator_attacker(generator, budget))],
                targets,
                dataset=f"{self.dataset.name}@{label}",
            )
        self._write_report(reports, "proportion_report.txt")


def _percent(proportion: float) -> str:
    return f"{proportion * 100:g}%"


def run_pipeline(settings: RunSettings, command: str, *, dry_run: bool = False) -> RunManifest:
    """Validate, then run `command` in a fresh run directory and return its manifest.

    With `dry_run` nothing is written: the manifest is marked dry and carries the plan.
    """
    require(settings, command)
    lab = Lab(settings, command)
    if dry_run:
        lab.manifest.plan = lab.plan()
        lab.manifest.status = "dry"
        lab.manifest.finished_at = utcnow()
        return lab.manifest
    with lab:
        lab.execute()
    return lab.manifest
