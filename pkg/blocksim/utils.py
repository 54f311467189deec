import json
from typing import Any, Dict, Mapping, Optional, Sequence, Set, Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

from blocksim.errors import InvalidConfig

M = TypeVar("M", bound=BaseModel)


def model_to_primitive(
    model: BaseModel,
    exclude: Optional[Sequence[str]] = None,
    keep_python_primitives: bool = False,
) -> Dict:
    """
    Convert pydantic-{model} to dict transforming complex types to primitives (e.g. enums to str)
    :param model: Pydantic model
    :param exclude: List of field to exclude from result dict
    :param keep_python_primitives: If True result dict will have python-primitives (e.g. enums)
    :return: Dict with fields from given model
    """
    exclude_set: Set[Union[int, str]] = set(exclude or [])

    if keep_python_primitives:
        return model.dict(exclude=exclude_set)
    return json.loads(model.json(exclude=exclude_set))


def error_field(exc: ValidationError) -> str:
    """
    Dotted location of the first validation error

    >>> from pydantic import BaseModel
    >>> class Section(BaseModel):
    ...     qps: float
    >>> class Config(BaseModel):
    ...     workload: Section
    >>> try:
    ...     Config.parse_obj({"workload": {"qps": "fast"}})
    ... except ValidationError as exc:
    ...     error_field(exc)
    'workload.qps'
    """
    location = exc.errors()[0]["loc"]
    return ".".join(str(part) for part in location if part != "__root__") or "__root__"


def error_message(exc: ValidationError) -> str:
    return str(exc.errors()[0]["msg"])


def parse_model(model_type: Type[M], data: Mapping[str, Any]) -> M:
    """
    Validate {data} as {model_type}

    :raise InvalidConfig naming the first offending field
    """
    try:
        return model_type.parse_obj(data)
    except ValidationError as exc:
        raise InvalidConfig(error_field(exc), error_message(exc)) from exc


def revalidate(model: M) -> M:
    """Run validators again on a model modified through .copy(update=...)"""
    return parse_model(type(model), model_to_primitive(model))
