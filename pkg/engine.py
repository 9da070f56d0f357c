"""
Gamma LDM Engine - Headless CLI for the desk-scale latent diffusion pipeline
Runs phantom generation, VAE and diffusion training, sampling, downstream
evaluation, benchmarking and reporting without GUI dependencies
"""

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd

from bench import BASELINE_FILE, UTILITY_FILE, bench_throughput, report, write_throughput
from diffusion import RESOLUTION_MODES, DiffusionModelSpec, DiffusionTrainConfig, DiffusionTrainer, make_schedule
from downstream_eval import DownstreamConfig, train_classifier, train_segmenter, utility_curve
from gamma_stats import GammaParams
from gamma_vae import VaeConfig, VaeLossConfig, VaeTrainConfig, VaeTrainer, evaluate_reconstruction, fit_prior_gridsearch
from ode_sampler import GenerativeModel, generate_dataset, solver_order_probe
from phantom_data import (
    build_training_corpus,
    corpus_from_records,
    load_camus_layout,
    load_split,
    save_split,
    write_map_split,
)
from run_config import ConfigError, load_run_config
from spade_unet import DenoiserConfig
from tensor_ops import configure_threads, enable_determinism, set_precision

COMMANDS = (
    "phantom-gen",
    "fit-prior",
    "train-vae",
    "train-diffusion",
    "generate",
    "train-downstream",
    "eval",
    "bench",
    "order-probe",
    "report",
)


class GammaLDMEngine:
    """Headless pipeline engine; one subcommand per run"""

    def __init__(self, config_path=None, overrides=(), seed=None, out=None):
        """
        Initialize engine with configuration

        Args:
            config_path: Path to config.json file (None = built-in defaults)
            overrides: iterable of 'section.key=value' strings
            seed: global seed override
            out: output directory override
        """
        self.config_path = config_path
        self.config = load_run_config(config_path, overrides, seed, out)
        self.out_dir = self.config.output_dir
        self.logs_dir = self.out_dir / "logs"
        self.logs_dir.mkdir(parents=True, exist_ok=True)
        self.status_file = self.logs_dir / "gamma_ldm_status.json"
        self._handlers = []

        self.setup_logging()
        options = self.config["options"]
        set_precision(options["precision"])
        if options["deterministic"]:
            enable_determinism()
        self.threads = configure_threads(self.config["bench"]["threads"])

    def setup_logging(self):
        """Setup twin-stream logging (console + file)"""
        log_path = self.logs_dir / f"gamma_ldm_{datetime.now().strftime('%Y%m%d')}.log"

        formatter = logging.Formatter(
            '%(asctime)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

        # library modules log through their own loggers; the root collects them
        root = logging.getLogger()
        root.setLevel(logging.INFO)

        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setLevel(logging.INFO)
        console_handler.setFormatter(formatter)

        file_handler = logging.FileHandler(log_path, encoding='utf-8')
        file_handler.setLevel(logging.INFO)
        file_handler.setFormatter(formatter)

        for handler in (console_handler, file_handler):
            root.addHandler(handler)
            self._handlers.append(handler)

        self.logger = logging.getLogger('GammaLDM')
        self.logger.info("=" * 60)
        self.logger.info("Gamma LDM Engine Starting")
        self.logger.info(f"Config: {self.config_path or 'built-in defaults'}")
        self.logger.info(f"Output: {self.out_dir}")
        self.logger.info(f"Log file: {log_path}")
        self.logger.info("=" * 60)

    def close(self):
        """Detach this engine's log handlers"""
        root = logging.getLogger()
        for handler in self._handlers:
            root.removeHandler(handler)
            handler.close()
        self._handlers = []

    def update_status(self, status, progress, message):
        """
        Update status JSON file for progress monitoring

        Args:
            status: Current status ('running', 'complete', 'error', 'stopped')
            progress: Progress percentage (0-100)
            message: Status message
        """
        status_data = {
            'status': status,
            'progress': progress,
            'message': message,
            'timestamp': datetime.now().isoformat()
        }

        try:
            with open(self.status_file, 'w') as f:
                json.dump(status_data, f, indent=2)
        except Exception as e:
            self.logger.error(f"Failed to update status file: {e}")

    # ===== Paths and builders =====

    @property
    def seed(self):
        return self.config.seed

    def stage_dir(self, name):
        path = self.out_dir / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    @property
    def phantom_root(self):
        return self.out_dir / "data" / "phantoms"

    @property
    def maps_root(self):
        return self.out_dir / "data" / "maps"

    def vae_path(self, levels):
        return self.out_dir / "vae" / f"L{levels}" / "vae.ckpt"

    def model_names(self):
        names = list(self.config["models"])
        only = self.config["options"]["only_models"]
        if only:
            missing = set(only) - set(names)
            if missing:
                raise ConfigError("options.only_models names unknown models", sorted(missing))
            names = [n for n in names if n in only]
        if not names:
            raise ConfigError("No models configured", ["models"])
        return names

    def model_spec(self, name):
        entry = self.config["models"][name]
        mode = entry["resolution_mode"]
        if mode not in RESOLUTION_MODES:
            raise ConfigError(f"Model '{name}' has an unknown resolution mode", [f"models.{name}.resolution_mode"])
        factor = RESOLUTION_MODES[mode]
        options = self.config["options"]
        denoiser = DenoiserConfig(
            levels=entry.get("levels", 3),
            base_channels=entry.get("base_channels", 32),
            spade_everywhere=entry.get("spade_everywhere", options["spade_everywhere"]),
            sigma_embedding_dim=options["sigma_embedding_dim"],
        )
        return DiffusionModelSpec(
            name=name,
            resolution_mode=mode,
            schedule=make_schedule(entry["schedule"], rho=self.config["sampler"]["rho"]),
            denoiser=denoiser,
            vae_checkpoint=str(self.vae_path(int(math.log2(factor)))) if factor > 1 else None,
            image_size=self.config["phantom"]["resolution"],
        )

    def downstream_config(self, **changes):
        section = {k: v for k, v in self.config["downstream"].items() if k != "tasks"}
        section.update(changes)
        return DownstreamConfig(**section)

    def load_phantoms(self, split):
        return load_split(self.phantom_root, split)

    def load_models(self):
        return [GenerativeModel.load(self.stage_dir("diffusion") / f"{name}.ckpt") for name in self.model_names()]

    # ===== Commands =====

    def cmd_phantom_gen(self):
        """Build the corpus (phantoms or a CAMUS folder) and write the splits"""
        cfg = self.config["phantom"]
        camus_root = self.config["paths"]["camus_root"]
        if camus_root:
            camus = load_camus_layout(camus_root, expected_resolution=cfg["resolution"],
                                      label_order=self.config["paths"]["camus_label_order"])
            for problem in camus.diagnostics:
                self.logger.warning(f"CAMUS: {problem}")
            corpus = corpus_from_records(camus.records, cfg["variants"], self.seed, cfg["n_test_patients"])
        else:
            corpus = build_training_corpus(
                cfg["n_patients"], cfg["views"], cfg["phases"], cfg["variants"], self.seed,
                resolution=cfg["resolution"], n_test_patients=cfg["n_test_patients"],
            )
        return [
            save_split(corpus.train_records, self.phantom_root, "train"),
            save_split(corpus.test_records, self.phantom_root, "test"),
            write_map_split(corpus.generation_maps, self.maps_root, "train"),
        ]

    def cmd_fit_prior(self):
        """Grid-search the Gamma prior on in-sector training pixels"""
        cfg = self.config["vae"]
        prior = fit_prior_gridsearch(
            self.load_phantoms("train"),
            np.linspace(*cfg["alpha_grid"][:2], int(cfg["alpha_grid"][2])),
            np.linspace(*cfg["beta_grid"][:2], int(cfg["beta_grid"][2])),
        )
        path = self.out_dir / "prior.json"
        with open(path, "w") as f:
            json.dump({"alpha": prior.alpha, "beta": prior.beta}, f, indent=2)
        return [path]

    def prior(self):
        path = self.out_dir / "prior.json"
        if path.exists():
            with open(path, "r") as f:
                fitted = json.load(f)
            return GammaParams(fitted["alpha"], fitted["beta"])
        cfg = self.config["vae"]
        return GammaParams(cfg["prior_alpha"], cfg["prior_beta"])

    def cmd_train_vae(self):
        """Train one Gamma VAE per configured depth"""
        cfg = self.config["vae"]
        train_records = self.load_phantoms("train")
        test_records = self.load_phantoms("test")
        loss_config = VaeLossConfig(cfg["lambda1"], cfg["lambda2"], cfg["lambda3"], cfg["lambda4"], self.prior())
        train_config = VaeTrainConfig(cfg["epochs"], cfg["batch_size"], cfg["learning_rate"], tuple(cfg["augmentations"]))

        artifacts = []
        evaluation = {}
        for levels in cfg["levels"]:
            vae_config = VaeConfig(levels=levels, width_unit=cfg["width_unit"], image_size=self.config["phantom"]["resolution"])
            trainer = VaeTrainer(vae_config, loss_config, train_config, self.vae_path(levels).parent, seed=self.seed)
            artifacts.append(trainer.train(train_records))
            trainer.model.eval()
            evaluation[f"L{levels}"] = evaluate_reconstruction(trainer.model, test_records)
            self.logger.info(f"VAE L{levels}: test reconstruction MSE {evaluation[f'L{levels}']:.5f}")

        path = self.stage_dir("vae") / "vae_eval.json"
        with open(path, "w") as f:
            json.dump(evaluation, f, indent=2)
        return artifacts + [path]

    def cmd_train_diffusion(self):
        """Train every configured diffusion model"""
        cfg = self.config["diffusion"]
        train_config = DiffusionTrainConfig(
            epochs=cfg["epochs"], batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
            augment_probability=cfg["augment_probability"],
        )
        records = self.load_phantoms("train")
        artifacts = []
        names = self.model_names()
        for i, name in enumerate(names):
            self.update_status('running', int(100 * i / len(names)), f'Training {name}')
            trainer = DiffusionTrainer(self.model_spec(name), train_config, self.stage_dir("diffusion"), seed=self.seed)
            artifacts.append(trainer.train(records))
        return artifacts

    def cmd_generate(self):
        """Generate one synthetic dataset per (model, NFE setting)"""
        cfg = self.config["sampler"]
        maps = load_split(self.maps_root, "train")
        artifacts = []
        for model in self.load_models():
            generate_dataset(model, maps, cfg["nfe_settings"], self.seed, self.stage_dir("generated"),
                             solver_kind=cfg["kind"], batch_size=cfg["batch_size"])
            artifacts += [self.out_dir / "generated" / model.name / f"nfe_{nfe}" for nfe in cfg["nfe_settings"]]
        return artifacts

    def cmd_train_downstream(self):
        """Real-phantom downstream baseline (and its negative control when configured)"""
        train_records = self.load_phantoms("train")
        test_records = self.load_phantoms("test")
        tasks = self.config["downstream"]["tasks"]
        cfg = self.downstream_config()
        output = self.stage_dir("downstream")

        reports = {}
        if "seg" in tasks:
            reports.update(train_segmenter(train_records, test_records, cfg, self.seed, output).reports)
        if "cls" in tasks:
            reports.update(train_classifier(train_records, test_records, cfg, self.seed, output).reports)

        model_name = "real_shuffled" if cfg.shuffle_labels else "real"
        rows = [{"model": model_name, "nfe": 0, "metric": k, "mean": r.mean, "std": r.std} for k, r in reports.items()]
        path = self.out_dir / BASELINE_FILE
        pd.DataFrame(rows, columns=["model", "nfe", "metric", "mean", "std"]).to_csv(path, index=False)
        details = output / "metrics_reports.json"
        with open(details, "w") as f:
            json.dump({k: asdict(r) for k, r in reports.items()}, f, indent=2)
        return [path, details]

    def cmd_eval(self):
        """Utility-vs-NFE table over every generated dataset"""
        table = utility_curve(
            self.out_dir / "generated", self.model_names(), self.config["sampler"]["nfe_settings"],
            self.load_phantoms("test"), self.downstream_config(), self.seed,
            downstream=tuple(self.config["downstream"]["tasks"]), output_path=self.out_dir / UTILITY_FILE,
        )
        self.logger.info(f"Utility table: {len(table)} rows")
        return [self.out_dir / UTILITY_FILE]

    def cmd_bench(self):
        """Throughput versus NFE for every model"""
        cfg = self.config["bench"]
        records = bench_throughput(
            self.load_models(), cfg["nfe_settings"], cfg["batch"], cfg["repeats"], self.seed,
            reference=cfg["reference"], solver_kind=self.config["sampler"]["kind"], threads=cfg["threads"],
        )
        return [write_throughput(records, self.out_dir)]

    def cmd_order_probe(self):
        """Fitted global error order of both solvers on the analytic Gaussian"""
        steps = self.config["sampler"]["order_probe_steps"]
        schedule = make_schedule("EDM", rho=self.config["sampler"]["rho"])
        rows = []
        for kind in ("euler", "heun"):
            result = solver_order_probe(kind, schedule, steps)
            rows.append({"solver": kind, "slope": result.slope,
                         "steps": json.dumps(result.step_counts), "errors": json.dumps(result.errors)})
        path = self.out_dir / "order_probe.csv"
        pd.DataFrame(rows).to_csv(path, index=False)
        return [path]

    def cmd_report(self):
        """Merge every result table into report.csv"""
        report(self.out_dir)
        return [self.out_dir / "report.csv"]

    # ===== Entry points =====

    def run(self, command):
        """Run one subcommand; returns True on success"""
        if command not in COMMANDS:
            self.logger.error(f"Unknown command: {command}")
            return False
        handler = getattr(self, "cmd_" + command.replace("-", "_"))
        try:
            self.logger.info(f"Command: {command} (seed {self.seed}, threads {self.threads})")
            self.update_status('running', 0, f'Running {command}')

            artifacts = handler()
            resolved = self.config.write_resolved(self.out_dir)
            self.config.update_manifest(
                command, artifacts + [resolved],
                models=list(self.config["models"]),
                nfe_settings=self.config["sampler"]["nfe_settings"],
            )

            self.logger.info(f"{command} complete: {len(artifacts)} artifact(s)")
            self.update_status('complete', 100, f'{command} complete')
            return True

        except KeyboardInterrupt:
            self.logger.warning("Process interrupted by user")
            self.update_status('stopped', 0, 'Process interrupted by user')
            return False

        except Exception as e:
            self.logger.error(f"{command} failed: {e}", exc_info=True)
            self.update_status('error', 0, f'{command} failed: {str(e)}')
            return False

    def run_test(self):
        """Quick validation: configuration resolves and every model spec builds"""
        self.logger.info("Running in TEST mode")
        self.logger.info(f"Models: {list(self.config['models'])}")
        self.logger.info(f"NFE settings: {self.config['sampler']['nfe_settings']}")
        for name in self.config["models"]:
            self.model_spec(name)
        self.update_status('complete', 100, 'Test completed successfully')
        return True


def build_parser():
    parser = argparse.ArgumentParser(
        description='Gamma LDM Engine - desk-scale semantic latent diffusion for sector-masked echo images'
    )
    parser.add_argument(
        'command',
        nargs='?',
        choices=COMMANDS,
        help='Pipeline stage to run'
    )
    parser.add_argument(
        '--config',
        default=None,
        help='Path to config.json file'
    )
    parser.add_argument(
        '--seed',
        type=int,
        default=None,
        help='Global seed override'
    )
    parser.add_argument(
        '--out',
        default=None,
        help='Output directory override'
    )
    parser.add_argument(
        '--override',
        action='append',
        default=[],
        metavar='SECTION.KEY=VALUE',
        help='Override one config value (repeatable)'
    )
    parser.add_argument(
        '--test',
        action='store_true',
        help='Run in test mode (validate config and model specs)'
    )
    return parser


def main(argv=None):
    """Main entry point for CLI execution; returns the exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.test and args.command is None:
        parser.print_usage()
        return 2

    try:
        engine = GammaLDMEngine(args.config, args.override, args.seed, args.out)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return 1

    try:
        if args.test:
            success = engine.run_test()
        else:
            success = engine.run(args.command)
    except ConfigError as e:
        engine.logger.error(f"Configuration error: {e}")
        success = False
    finally:
        engine.close()
    return 0 if success else 1


if __name__ == "__main__":
    sys.exit(main())
