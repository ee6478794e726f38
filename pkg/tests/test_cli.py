import json
from unittest import mock

from prompt_toolkit.application import create_app_session
from prompt_toolkit.input import create_pipe_input
from prompt_toolkit.output import DummyOutput
import pytest

from fadpy.cli import (
    ask_ok,
    cli_window,
    confirm_overwrite,
    EXIT_OK,
    EXIT_USAGE,
    EXIT_VIOLATION,
    run,
)
from fadpy.genotype import EdgeChoice, Genotype, parse_genotype, serialize_genotype
from fadpy.search import read_metrics
from fadpy.search_space import CellOp, TransformationId


SMALL_RUN = {
    "supernet": {"c": 8, "c_prime": 4, "num_nodes": 2, "space": "subset1"},
    "schedule": {"total_iters": 2, "derive_every": 1, "batch_size": 2,
                 "train_iters": 1, "log_every": 1},
    "data": {"num_scenes": 4, "eval_scenes": 2, "image_size": 16,
             "min_scale": 4.0, "max_scale": 12.0, "num_classes": 2, "max_objects": 2},
    "classification": {"num_images": 8, "eval_images": 4, "image_size": 8},
}


# ========
# fixtures
# ========


@pytest.fixture(autouse=True, scope="function")
def mock_input():
    with create_pipe_input() as pipe_input:
        with create_app_session(input=pipe_input, output=DummyOutput()):
            yield pipe_input


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(SMALL_RUN), encoding="utf-8")
    return path


@pytest.fixture
def verify_config(tmp_path):
    path = tmp_path / "verify.json"
    path.write_text(json.dumps({"supernet": {**SMALL_RUN["supernet"], "space": "full"}}),
                    encoding="utf-8")
    return path


def run_small(config_file, out, *args):
    return run([*args, "--config", str(config_file), "--output-dir", str(out)])


# =========
# CLI tools
# =========


def test_cli_window(capfd):

    at_enter = "=== header ===\n"
    at_exit = "==============\n"

    @cli_window("header", fillchar="=", wing_size=3)
    def cli_func():
        assert capfd.readouterr().out == at_enter

    cli_func()
    assert capfd.readouterr().out == at_exit


# ask_ok
# ------


@mock.patch("fadpy.cli.prompt", autospec=True, side_effect=StopIteration)
def test_ask_ok__use_prompt_message(mock_prompt):
    with pytest.raises(StopIteration):
        ask_ok("message")

    assert mock_prompt.call_args == mock.call("message")


@pytest.mark.parametrize(
    "input_",
    ("yes", "ye", "y", "YeS", "yEs"),
)
def test_ask_ok__yes(input_, mock_input):
    mock_input.send_text(input_ + "\n")
    assert ask_ok("some prompt")


@pytest.mark.parametrize(
    "input_",
    ("no", "n", "No", "nO"),
)
def test_ask_ok__no(input_, mock_input):
    mock_input.send_text(input_ + "\n")
    assert not ask_ok("some prompt")


@pytest.mark.parametrize(
    "input_",
    ("yess", "nno", "1", ","),
)
def test_ask_ok__continue_when_invalid_input(input_, mock_input):
    mock_input.send_text(input_ + "\n\n")
    with pytest.raises(EOFError):
        ask_ok("some prompt", default=None)


@mock.patch("fadpy.cli.prompt", autospec=True)
def test_ask_ok__continue_on_KeyboardInterrupt(mock_prompt):
    def mock_prompt_side_effect():
        raise KeyboardInterrupt
        yield
    mock_prompt.side_effect = mock_prompt_side_effect()

    with pytest.raises(StopIteration):
        ask_ok("some prompt")


@pytest.mark.parametrize(
    "default",
    (True, False),
)
def test_ask_ok__default(default, mock_input):
    mock_input.send_text("\n")
    assert ask_ok("some prompt", default=default) is default


# confirm_overwrite
# -----------------


def test_confirm_overwrite__nothing_exists(tmp_path):
    with mock.patch("fadpy.cli.ask_ok", autospec=True) as mock_ask_ok:
        assert confirm_overwrite([tmp_path / "missing.json"], force=False)
    mock_ask_ok.assert_not_called()


def test_confirm_overwrite__force(tmp_path):
    path = tmp_path / "genotype.json"
    path.touch()
    with mock.patch("fadpy.cli.ask_ok", autospec=True) as mock_ask_ok:
        assert confirm_overwrite([path], force=True)
    mock_ask_ok.assert_not_called()


@pytest.mark.parametrize("answer", (True, False))
def test_confirm_overwrite__asks_on_terminal(answer, tmp_path):
    path = tmp_path / "genotype.json"
    path.touch()
    with mock.patch("fadpy.cli.sys.stdin") as mock_stdin, \
            mock.patch("fadpy.cli.ask_ok", autospec=True,
                       return_value=answer) as mock_ask_ok:
        mock_stdin.isatty.return_value = True
        assert confirm_overwrite([path], force=False) is answer
    assert str(path) in mock_ask_ok.call_args.args[0]


def test_confirm_overwrite__eof_means_no(tmp_path):
    path = tmp_path / "genotype.json"
    path.touch()
    with mock.patch("fadpy.cli.sys.stdin") as mock_stdin, \
            mock.patch("fadpy.cli.ask_ok", autospec=True, side_effect=EOFError):
        mock_stdin.isatty.return_value = True
        assert not confirm_overwrite([path], force=False)


# ========
# Commands
# ========


def test_count(capsys):
    assert run(["count"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "746,496" in out
    assert "paper reports ~2.3e13" in out


def test_count__enumerate(capsys):
    assert run(["count", "--enumerate"]) == EXIT_OK
    assert "closed form 27, enumeration 27" in capsys.readouterr().out


def test_count__enumerate_mismatch(capsys):
    with mock.patch("fadpy.oracle.count_by_enumeration", autospec=True,
                    return_value=26):
        assert run(["count", "--enumerate"]) == EXIT_VIOLATION
    assert "closed form 27, enumeration 26" in capsys.readouterr().out


def test_verify(verify_config, tmp_path, capsys):
    code = run_small(verify_config, tmp_path / "out",
                     "verify", "--trials", "2", "--probes", "10")
    assert code == EXIT_OK
    assert "representations shared=12 unshared=26" in capsys.readouterr().out


def test_verify__injected_fault(verify_config, tmp_path):
    args = ("verify", "--trials", "2", "--probes", "4", "--inject", "weight")
    assert run_small(verify_config, tmp_path / "out", *args) == EXIT_VIOLATION


def test_verify__broken_relu_gradient(verify_config, tmp_path, capsys):
    args = ("verify", "--trials", "2", "--probes", "50", "--inject", "relu")
    assert run_small(verify_config, tmp_path / "out", *args) == EXIT_VIOLATION
    assert "FAILED" in capsys.readouterr().out


def test_verify__wrong_path_count(verify_config, tmp_path, capsys):
    args = ("verify", "--trials", "2", "--probes", "10")
    with mock.patch("fadpy.oracle.count_discrete_paths", autospec=True,
                    return_value=28):
        assert run_small(verify_config, tmp_path / "out", *args) == EXIT_VIOLATION
    assert "closed form 28" in capsys.readouterr().out


@pytest.mark.slow
def test_verify__full_scale(verify_config, tmp_path, capsys):
    args = ("verify", "--trials", "100", "--probes", "50")
    assert run_small(verify_config, tmp_path / "out", *args) == EXIT_OK
    assert "(50 probes)" in capsys.readouterr().out


def test_search__deterministic(config_file, tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    assert run_small(config_file, first, "search") == EXIT_OK
    assert run_small(config_file, second, "search") == EXIT_OK
    genotype = (first / "genotype.json").read_bytes()
    assert genotype == (second / "genotype.json").read_bytes()
    header, records = read_metrics(first / "metrics.jsonl")
    assert header["command"] == "search"
    assert header["decouple"] is True
    assert records[0]["iter"] == 1


def test_search__no_decouple(config_file, tmp_path):
    out = tmp_path / "out"
    assert run_small(config_file, out, "search", "--no-decouple") == EXIT_OK
    header, _ = read_metrics(out / "metrics.jsonl")
    assert header["decouple"] is False


def test_search_then_derive(config_file, tmp_path):
    out = tmp_path / "out"
    assert run_small(config_file, out, "search") == EXIT_OK
    derived = tmp_path / "derived.json"
    assert run_small(config_file, out, "derive", "--genotype", str(derived)) == EXIT_OK
    searched = parse_genotype((out / "genotype.json").read_text(encoding="utf-8"))
    assert parse_genotype(derived.read_text(encoding="utf-8")) == searched


def test_search_then_train(config_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert run_small(config_file, out, "search") == EXIT_OK
    assert run_small(config_file, out, "train") == EXIT_OK
    header, records = read_metrics(out / "train_metrics.jsonl")
    assert header["genotype_source"] == str(out / "genotype.json")
    assert "eval" in records[-1]
    assert "toy AP@0.5" in capsys.readouterr().out


def test_train__random(config_file, tmp_path):
    out = tmp_path / "out"
    assert run_small(config_file, out, "train", "--random") == EXIT_OK
    header, _ = read_metrics(out / "train_metrics.jsonl")
    assert header["genotype_source"] == "random"


def test_train__missing_genotype(config_file, tmp_path, capsys):
    assert run_small(config_file, tmp_path / "out", "train") == EXIT_USAGE
    assert "does not exist" in capsys.readouterr().err


def test_train__cell_op_in_genotype(config_file, tmp_path, capsys):
    std = TransformationId.STD_T1
    gene = ((EdgeChoice(0, CellOp.SKIP_CONNECT),),
            (EdgeChoice(0, std), EdgeChoice(1, std)))
    path = tmp_path / "genotype.json"
    path.write_text(serialize_genotype(Genotype((gene, gene))), encoding="utf-8")
    code = run_small(config_file, tmp_path / "out", "train", "--genotype", str(path))
    assert code == EXIT_USAGE
    assert "unknown transformation 'skip_connect'" in capsys.readouterr().err


def test_train__classify_task(config_file, tmp_path):
    code = run_small(config_file, tmp_path / "out",
                     "train", "--random", "--task", "classify")
    assert code == EXIT_USAGE


def test_gen_data(config_file, tmp_path, capsys):
    out = tmp_path / "out"
    assert run_small(config_file, out, "gen-data") == EXIT_OK
    assert "6 scenes" in capsys.readouterr().out
    assert (out / "scenes").is_dir()


def test_ablate(config_file, tmp_path):
    out = tmp_path / "out"
    assert run_small(config_file, out, "ablate", "--searches", "1") == EXIT_OK
    study = json.loads((out / "ablation.json").read_text(encoding="utf-8"))
    assert set(study["fractions"]) == {"true", "false"}


@pytest.mark.parametrize(
    "content",
    ('{"supernet": {"m": 2}}', '{"seed": 1,', '{"schedule": {"derive_every": 7}}'),
)
def test_run__bad_config(content, tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(content, encoding="utf-8")
    assert run(["count", "--config", str(path)]) == EXIT_USAGE
    assert capsys.readouterr().err.startswith("fadpy: error:")


def test_run__missing_config(tmp_path):
    assert run(["count", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE


def test_run__unknown_command():
    with pytest.raises(SystemExit) as exc_info:
        run(["bogus"])
    assert exc_info.value.code == 2
