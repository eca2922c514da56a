#!/usr/bin/env python3
"""
Command line surface of the self-training metric learning pipeline.

This module allows the package to be run as: python -m src <command> ...

Exit codes: 0 success, 1 invalid input (usage, config, file format,
validation), 2 runtime failure (including a failed gradient check).
"""
import argparse
import logging
import os
import sys
import time
from typing import List, Optional, Sequence

from .basis_miner import load_basis, save_basis
from .config_manager import TrainConfig, load_config
from .datasets import (
    Dataset, SynthSpec, generate_synth, load_dataset, load_truth, write_dataset, write_truth,
)
from .embedding_model import embed, load_params, params_fingerprint, save_params
from .error_handler import (
    EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, ErrorParser, ValidationError,
    format_error_for_display,
)
from .gradcheck import run_gradcheck
from .logging_setup import configure_logging
from .pseudo_labeler import PseudoLabeledSet, cluster_accuracy, save_model
from .retrieval_eval import DEFAULT_KS, RetrievalReport, evaluate_leave_one_out
from .run_report import RunReport, write_report, write_retrieval_report
from .run_validator import RunValidation, RunValidator
from .trainer import (
    FoldEnsemble, TrainingHistory, generate_pseudo_labels, held_out_report, pseudo_label_seed,
    run_folds, self_train, student_start, train_student, train_teacher,
)

logger = logging.getLogger(__name__)

__version__ = "1.0.0"


class SladeArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _add_training_inputs(parser: argparse.ArgumentParser, unlabeled: bool = True):
    parser.add_argument('--config', required=True, metavar='PATH', help='Config file')
    parser.add_argument('--labeled', required=True, metavar='PATH', help='Labeled dataset')
    if unlabeled:
        parser.add_argument('--unlabeled', required=True, metavar='PATH',
                            help='Unlabeled dataset')
    parser.add_argument('--eval', dest='eval_data', metavar='PATH',
                        help='Labeled held-out dataset scored after training')
    parser.add_argument('--out-dir', required=True, metavar='DIR', help='Output directory')


def build_parser() -> argparse.ArgumentParser:
    parser = SladeArgumentParser(
        prog='slade',
        description='Self-training distance metric learning with basis-mined pseudo pairs',
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--log-level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Logging level (default: INFO)')
    parser.add_argument('--log-file', metavar='PATH', help='Mirror the log to a file')
    parser.add_argument('--progress', action='store_true', help='Show progress bars')

    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    gen = sub.add_parser('gen-data', help='Generate the synthetic seen/unseen benchmark')
    defaults = SynthSpec()
    gen.add_argument('--seen-classes', type=int, default=defaults.seen_classes)
    gen.add_argument('--unseen-classes', type=int, default=defaults.unseen_classes)
    gen.add_argument('--samples-per-class', type=int, default=defaults.samples_per_class)
    gen.add_argument('--test-samples-per-class', type=int,
                     default=defaults.test_samples_per_class)
    gen.add_argument('--dim', type=int, default=defaults.dim)
    gen.add_argument('--center-separation', type=float, default=defaults.center_separation)
    gen.add_argument('--within-std', type=float, default=defaults.within_std)
    gen.add_argument('--seed', type=int, default=defaults.seed)
    gen.add_argument('--out-dir', required=True, metavar='DIR')

    teacher = sub.add_parser('train-teacher', help='Train the teacher on labeled data')
    _add_training_inputs(teacher, unlabeled=False)
    teacher.add_argument('--init', metavar='PATH', help='Starting checkpoint')

    pseudo = sub.add_parser('pseudo-label', help='Cluster unlabeled data with a teacher')
    pseudo.add_argument('--config', required=True, metavar='PATH')
    pseudo.add_argument('--teacher', required=True, metavar='PATH')
    pseudo.add_argument('--unlabeled', required=True, metavar='PATH')
    pseudo.add_argument('--truth', metavar='PATH',
                        help='Ground-truth sidecar; only used to report cluster accuracy')
    pseudo.add_argument('--out-dir', required=True, metavar='DIR')

    student = sub.add_parser('train-student', help='Train student and basis from a teacher')
    _add_training_inputs(student, unlabeled=False)
    student.add_argument('--teacher', required=True, metavar='PATH')
    student.add_argument('--pseudo-labeled', required=True, metavar='PATH',
                         help='Output of pseudo-label (pseudo.data)')
    student.add_argument('--basis', metavar='PATH', help='Warmed basis to start from')
    student.add_argument('--init', metavar='PATH',
                         help='Checkpoint the teacher started from (student_init = shared)')

    selftrain = sub.add_parser('self-train', help='Run the full self-training loop')
    _add_training_inputs(selftrain)

    folds = sub.add_parser('run-folds', help='Train and concatenate per-fold students')
    _add_training_inputs(folds)

    evaluate = sub.add_parser('evaluate', help='Leave-one-out retrieval metrics')
    evaluate.add_argument('--params', required=True, nargs='+', metavar='PATH',
                          help='One checkpoint, or per-fold checkpoints to concatenate')
    evaluate.add_argument('--data', required=True, metavar='PATH', help='Labeled dataset')
    evaluate.add_argument('--ks', type=int, nargs='+', default=list(DEFAULT_KS),
                          help='Recall@K cutoffs (default: 1 2 4 8)')
    evaluate.add_argument('--out', metavar='PATH', help='Also write the report here')

    grad = sub.add_parser('gradcheck', help='Finite-difference check of every gradient')
    grad.add_argument('--seed', type=int, default=0)
    grad.add_argument('--coordinates', type=int, default=100)

    return parser


def parse_arguments(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """
    Parse command line arguments.

    Returns:
        argparse.Namespace: Parsed command line arguments
    """
    return build_parser().parse_args(argv)


def _require_valid(validation: RunValidation):
    for warning in validation.warnings:
        logger.warning(warning.message)
    if not validation.overall_valid:
        raise ValidationError("pre-flight validation failed", details=validation.get_summary())


def _load_labeled(path: str) -> Dataset:
    dataset = load_dataset(path)
    if not dataset.labeled:
        raise ValidationError(f"{path} is not a labeled dataset")
    return dataset


def _out(args, name: str) -> str:
    return os.path.join(args.out_dir, name)


def _report(args, config: TrainConfig, config_text: str, history: TrainingHistory,
            checkpoints, evaluation: Optional[RetrievalReport] = None, **extras) -> RunReport:
    return RunReport(args.command, config.seed, config_text, history.to_dict(),
                     dict(checkpoints), evaluation, extras)


def cmd_gen_data(args) -> int:
    spec = SynthSpec(
        seen_classes=args.seen_classes, unseen_classes=args.unseen_classes,
        samples_per_class=args.samples_per_class, dim=args.dim,
        center_separation=args.center_separation, within_std=args.within_std,
        seed=args.seed, test_samples_per_class=args.test_samples_per_class,
    )
    bench = generate_synth(spec)
    os.makedirs(args.out_dir, exist_ok=True)
    write_dataset(bench.labeled, _out(args, 'labeled.data'))
    write_dataset(bench.unlabeled, _out(args, 'unlabeled.data'))
    write_truth(bench.unlabeled_truth, _out(args, 'unlabeled.truth'))
    write_dataset(bench.test, _out(args, 'test.data'))
    print(f"wrote benchmark to {args.out_dir}")
    return EXIT_OK


def cmd_train_teacher(args, config: TrainConfig, config_text: str) -> int:
    labeled = _load_labeled(args.labeled)
    _require_valid(RunValidator(config).validate_teacher_run(labeled, args.out_dir))
    init = load_params(args.init) if args.init else None
    history = TrainingHistory()
    teacher = train_teacher(labeled, config, init, history, args.progress)
    save_params(teacher, _out(args, 'teacher.params'))
    evaluation = held_out_report(teacher, load_dataset(args.eval_data)) if args.eval_data else None
    return _finish(args, _report(args, config, config_text, history,
                                 {'teacher.params': params_fingerprint(teacher)}, evaluation))


def cmd_pseudo_label(args, config: TrainConfig, config_text: str) -> int:
    teacher = load_params(args.teacher)
    unlabeled = load_dataset(args.unlabeled)
    _require_valid(RunValidator(config).validate_pseudo_label_run(teacher, unlabeled,
                                                                  args.out_dir))
    seed = pseudo_label_seed(config.seed)
    pseudo = generate_pseudo_labels(teacher, unlabeled, config.clusters, seed,
                                    config.kmeans_max_iter, config.kmeans_restarts)
    write_dataset(Dataset(pseudo.samples, pseudo.pseudo_labels), _out(args, 'pseudo.data'))
    if pseudo.model is not None:
        save_model(pseudo.model, _out(args, 'pseudo.kmeans'))
    extras = {'source_teacher': pseudo.source_teacher, 'clusters': pseudo.k,
              'dead_rows': len(unlabeled) - len(pseudo)}
    if args.truth:
        # Evaluation path only: the sidecar never feeds training
        truth = load_truth(args.truth)
        if pseudo.source_rows is not None:
            truth = truth[pseudo.source_rows]
        extras['cluster_accuracy'] = cluster_accuracy(pseudo.pseudo_labels, truth)
    return _finish(args, _report(args, config, config_text, TrainingHistory(), {}, None,
                                 **extras))


def cmd_train_student(args, config: TrainConfig, config_text: str) -> int:
    labeled = _load_labeled(args.labeled)
    teacher = load_params(args.teacher)
    pseudo_data = _load_labeled(args.pseudo_labeled)
    _require_valid(RunValidator(config).validate_self_train_run(
        labeled, pseudo_data, args.out_dir, teacher))
    labels = pseudo_data.labels
    k = max(config.clusters, int(labels.max()) + 1 if labels.size else 0)
    pseudo = PseudoLabeledSet(pseudo_data.features, labels, params_fingerprint(teacher), k)
    basis = load_basis(args.basis) if args.basis else None
    start = student_start(labeled, config, teacher, load_params(args.init) if args.init else None)
    history = TrainingHistory()
    student, basis, _ = train_student(labeled, pseudo, config, start, basis=basis,
                                      history=history, progress=args.progress)
    save_params(student, _out(args, 'student.params'))
    save_basis(basis, _out(args, 'student.basis'))
    evaluation = held_out_report(student, load_dataset(args.eval_data)) if args.eval_data else None
    return _finish(args, _report(args, config, config_text, history,
                                 {'student.params': params_fingerprint(student)}, evaluation,
                                 source_teacher=pseudo.source_teacher))


def cmd_self_train(args, config: TrainConfig, config_text: str) -> int:
    labeled = _load_labeled(args.labeled)
    unlabeled = load_dataset(args.unlabeled)
    _require_valid(RunValidator(config).validate_self_train_run(labeled, unlabeled,
                                                                args.out_dir))
    evaluation = load_dataset(args.eval_data) if args.eval_data else None
    state = self_train(labeled, unlabeled, config, evaluation, progress=args.progress)
    checkpoints = {}
    for r, student in enumerate(state.round_students):
        name = f'round{r}_student.params'
        save_params(student, _out(args, name))
        checkpoints[name] = params_fingerprint(student)
    save_params(state.student, _out(args, 'student.params'))
    save_basis(state.basis, _out(args, 'student.basis'))
    checkpoints['student.params'] = params_fingerprint(state.student)
    final = held_out_report(state.student, evaluation) if evaluation else None
    return _finish(args, _report(args, config, config_text, state.history, checkpoints, final))


def cmd_run_folds(args, config: TrainConfig, config_text: str) -> int:
    labeled = _load_labeled(args.labeled)
    unlabeled = load_dataset(args.unlabeled)
    _require_valid(RunValidator(config).validate_self_train_run(labeled, unlabeled,
                                                                args.out_dir))
    evaluation = load_dataset(args.eval_data) if args.eval_data else None
    ensemble = run_folds(labeled, unlabeled, config, evaluation, args.progress)
    checkpoints = {}
    folds = {}
    for f, (member, state) in enumerate(zip(ensemble.members, ensemble.states)):
        name = f'fold{f}.params'
        save_params(member, _out(args, name))
        checkpoints[name] = params_fingerprint(member)
        folds[f'fold{f}'] = state.history.to_dict()
    final = None
    if evaluation is not None:
        part = evaluation.labeled_part()
        final = evaluate_leave_one_out(ensemble.embed(part.features), part.labels)
    report = RunReport(args.command, config.seed, config_text, folds, checkpoints, final,
                       {'held_out_classes': [[int(c) for c in held]
                                             for held in ensemble.held_out_classes]})
    return _finish(args, report)


def cmd_evaluate(args) -> int:
    members = [load_params(path) for path in args.params]
    data = _load_labeled(args.data).labeled_part()
    if len(members) == 1:
        embeddings = embed(members[0], data.features)
    else:
        embeddings = FoldEnsemble(tuple(members)).embed(data.features)
    report = evaluate_leave_one_out(embeddings, data.labels, args.ks)
    sys.stdout.write(write_retrieval_report(report, args.out))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    validation = run_gradcheck(args.seed, args.coordinates)
    for check in validation.checks:
        print(check)
    print(validation.get_summary())
    return EXIT_OK if validation.overall_valid else EXIT_RUNTIME


def _finish(args, report: RunReport) -> int:
    path = _out(args, 'report.json')
    write_report(report, path, time.monotonic() - args.started)
    if report.evaluation is not None:
        logger.info("held-out MAP@R %.4f  RP %.4f  P@1 %.4f", report.evaluation.map_at_r,
                    report.evaluation.r_precision, report.evaluation.p_at_1)
    return EXIT_OK


TRAINING_COMMANDS = {
    'train-teacher': cmd_train_teacher,
    'pseudo-label': cmd_pseudo_label,
    'train-student': cmd_train_student,
    'self-train': cmd_self_train,
    'run-folds': cmd_run_folds,
}


def run(args: argparse.Namespace) -> int:
    """Dispatch a parsed command."""
    args.started = time.monotonic()
    if args.command == 'gen-data':
        return cmd_gen_data(args)
    if args.command == 'evaluate':
        return cmd_evaluate(args)
    if args.command == 'gradcheck':
        return cmd_gradcheck(args)
    config, config_text = load_config(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    return TRAINING_COMMANDS[args.command](args, config, config_text)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point.

    Returns:
        int: Exit code (0 success, 1 invalid input, 2 runtime failure)
    """
    try:
        args = parse_arguments(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    configure_logging(args.log_level, args.log_file)
    try:
        return run(args)
    except Exception as exc:
        error = ErrorParser.parse_error(exc)
        logger.debug("command failed", exc_info=True)
        sys.stderr.write(format_error_for_display(error) + "\n")
        return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
