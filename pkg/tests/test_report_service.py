from unittest.mock import Mock

import pytest

from factories import small_model
from pacdrgp.domain.errors import DomainError
from pacdrgp.domain.experiment_models import ExperimentConfig
from pacdrgp.domain.pac_bounds import BoundInputs, LayerBoundInputs, bound_inputs_from_model
from pacdrgp.services.report_service import REPORT_FILENAME, ReportService
from pacdrgp.services.training_service import PreparedModel


def _service(tmp_path):
    model, dataset = small_model(num_states=8, num_hidden_layers=1, seed=1)
    training, artifacts = Mock(), Mock()
    training.load_or_train.return_value = PreparedModel(
        model=model, dataset=dataset, model_path=tmp_path / "model.txt", trained=False
    )
    return ReportService(training, artifacts), artifacts


def test_write_report_lists_every_variant(tmp_path) -> None:
    service, artifacts = _service(tmp_path)
    config = ExperimentConfig(dataset_path=tmp_path / "d.csv", output_dir=tmp_path / "runs")

    content, path = service.write_report(config, 500)

    assert path == tmp_path / "runs" / REPORT_FILENAME
    artifacts.write_text.assert_called_once_with(content, path)
    manifest, manifest_path = artifacts.write_manifest.call_args.args
    assert manifest_path == tmp_path / "runs" / "report_manifest.json"
    assert manifest["num_samples"] == 500
    lines = content.splitlines()
    assert lines[0] == "REPORT_VERSION: 1"
    assert "N: 500" in lines
    names = [line.split()[0] for line in lines[-4:]]
    assert names == ["theorem2", "theorem3", "theorem5", "covering"]


def test_two_sided_column_is_never_smaller(tmp_path) -> None:
    model, _ = small_model(num_states=8, num_hidden_layers=1, seed=1)
    inputs = bound_inputs_from_model(model)
    config = ExperimentConfig(dataset_path=tmp_path / "d.csv", output_dir=tmp_path)

    content = ReportService.render(inputs, 1000, config, empirical_risk=1.0)

    for line in content.splitlines()[-4:]:
        _, one, two = line.split()
        assert float(two) >= float(one)


def test_undefined_variant_is_reported_not_raised(tmp_path) -> None:
    layer = LayerBoundInputs(state_vars=[0.0, 0.0], cov=[[0.0, 0.0], [0.0, 0.0]], sigma_noise=1.0, lipschitz=0.0, delta=1.0)
    config = ExperimentConfig(dataset_path=tmp_path / "d.csv", output_dir=tmp_path)

    content = ReportService.render(BoundInputs(layers=(layer,), kl=0.0), 100, config, empirical_risk=0.5)

    assert content.splitlines()[-1].split() == ["covering", "undefined", "undefined"]


def test_preview_rejects_non_positive_n(tmp_path) -> None:
    service, _ = _service(tmp_path)
    config = ExperimentConfig(dataset_path=tmp_path / "d.csv", output_dir=tmp_path)

    with pytest.raises(DomainError, match="positive"):
        service.preview_report(config, 0)
