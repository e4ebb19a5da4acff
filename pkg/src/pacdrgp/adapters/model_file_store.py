from __future__ import annotations

from pathlib import Path

from pacdrgp.domain.model_codec import parse_model, render_model
from pacdrgp.domain.revarb_model import DeepModel


class TextModelStore:
    def save_model(self, model: DeepModel, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(render_model(model), encoding="utf-8")

    def load_model(self, path: Path) -> DeepModel:
        return parse_model(Path(path).read_text(encoding="utf-8"))

    def exists(self, path: Path) -> bool:
        return Path(path).is_file()
