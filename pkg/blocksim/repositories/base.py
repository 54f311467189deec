import json
import os
from abc import ABC
from typing import Any, Dict, Generic, Iterable, Iterator, List, Optional, Type, TypeVar, cast

import typing_inspect
from pydantic import BaseModel, ValidationError

from blocksim.errors import InvalidRecord, ParseError
from blocksim.utils import error_field, error_message, model_to_primitive

GenericModel = TypeVar("GenericModel", bound=BaseModel)


class JsonLinesRepo(Generic[GenericModel], ABC):
    """
    Read and write pydantic models as line-delimited JSON, one object per line

    Subclass with the model as generic argument:

    >>> class RowRepo(JsonLinesRepo[Row]):
    ...     pass
    ... # doctest: +SKIP
    """

    def __init__(self, directory: Optional[str] = None) -> None:
        self.directory = directory or os.getcwd()

    # =============
    # CONFIGURATION
    # =============

    def serialize(self, entity: GenericModel) -> Dict:
        """Convert pydantic model to dict, unset optional fields dropped"""
        return {
            key: value for key, value in model_to_primitive(entity).items() if value is not None
        }

    def deserialize(self, **kwargs: Any) -> GenericModel:
        """Create pydantic model from kwargs"""
        entity_type = self._get_generic_type()
        return entity_type(**kwargs)

    def validate_all(self, entities: List[GenericModel]) -> None:
        """Cross-record checks; raise InvalidRecord"""

    # ==============
    # READ METHODS
    # ==============

    def read(self, filename: str) -> List[GenericModel]:
        with open(self.build_path(filename), encoding="utf-8") as f:
            return self.parse(f)

    def parse(self, lines: Iterable[str]) -> List[GenericModel]:
        """
        Entities in line order; blank lines are skipped

        :raise ParseError with the line number if a line is not a JSON object
        :raise InvalidRecord naming the field if a record violates the model
        """
        entities = list(self._parse_lines(lines))
        self.validate_all(entities)
        return entities

    # ==============
    # WRITE METHODS
    # ==============

    def write(self, entities: Iterable[GenericModel], filename: str) -> None:
        with open(self.build_path(filename), "w", encoding="utf-8") as f:
            for line in self.dump(entities):
                f.write(line)
                f.write("\n")

    def dump(self, entities: Iterable[GenericModel]) -> Iterator[str]:
        for entity in entities:
            yield json.dumps(self.serialize(entity), sort_keys=True)

    def build_path(self, filename: str) -> str:
        return os.path.join(self.directory, filename)

    # ==============
    # PROTECTED & PRIVATE METHODS
    # ==============

    def _parse_lines(self, lines: Iterable[str]) -> Iterator[GenericModel]:
        for number, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(number, exc.msg) from exc
            if not isinstance(data, dict):
                raise ParseError(number, "expected an object")

            try:
                yield self.deserialize(**data)
            except ValidationError as exc:
                raise InvalidRecord(error_field(exc), number, error_message(exc)) from exc

    def _get_generic_type(self) -> Type[GenericModel]:
        """
        Get generic type of inherited JsonLinesRepo:

        >>> class TraceRepo(JsonLinesRepo[TraceRecord]):
        ...     pass
        ... # doctest: +SKIP
        >>> assert TraceRepo()._get_generic_type() is TraceRecord # doctest: +SKIP
        """
        return cast(
            Type[GenericModel],
            typing_inspect.get_args(typing_inspect.get_generic_bases(self)[-1])[0],
        )
