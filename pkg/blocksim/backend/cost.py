from blocksim.backend.plans import BatchPlan
from blocksim.core import CostModelParams, Seconds
from blocksim.errors import EmptyPlan


def batch_latency(plan: BatchPlan, params: CostModelParams) -> Seconds:
    """
    Execution time of one step under the linear cost model

    >>> plan = BatchPlan(decode_ids=tuple(range(48)), context_tokens=4800)
    >>> round(batch_latency(plan, CostModelParams()), 10)
    0.05848
    """
    if plan.is_empty:
        raise EmptyPlan()

    return (
        params.c0
        + params.c_prefill * plan.total_prefill_tokens
        + params.c_decode * len(plan.decode_ids)
        + params.c_context * plan.context_tokens
    )
