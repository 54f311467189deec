import json
import os
from typing import Dict, Generic, Optional, Sequence, TypeVar, Union

JsonSerializable = Union[Dict, Sequence, str, bool, int, float]
JsonSerializableGeneric = TypeVar("JsonSerializableGeneric", bound=JsonSerializable)


class JsonRepo(Generic[JsonSerializableGeneric]):
    """
    Config files and golden fixtures as plain JSON

    Written files are key-sorted and indented so repeated runs produce identical bytes.
    """

    def __init__(self, directory: Optional[str] = None) -> None:
        self.directory = directory or os.getcwd()

    def read(self, filename: str) -> JsonSerializableGeneric:
        with open(self.build_path(filename), encoding="utf-8") as f:
            return json.load(f)

    def write(self, data: JsonSerializableGeneric, filename: str) -> str:
        path = self.build_path(filename)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")

        return path

    def exists(self, filename: str) -> bool:
        return os.path.exists(self.build_path(filename))

    def build_path(self, filename: str) -> str:
        return os.path.join(self.directory, filename)
