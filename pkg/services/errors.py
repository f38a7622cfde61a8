"""
Exceções do simulador de escalonamento
"""
from typing import Any, Dict, Optional


class SchedulingError(Exception):
    """Erro base de todos os serviços de escalonamento"""


class ConfigurationError(SchedulingError, ValueError):
    """Dimensões incompatíveis, formatos inválidos ou tamanhos recusados"""


class SlotRangeError(SchedulingError, IndexError):
    """Slot pedido fora do intervalo registrado no trace"""


class DomainError(SchedulingError):
    """Ponto fora de conv(S)"""


class NumericError(SchedulingError):
    """Entrada não finita (NaN/inf) num solver numérico"""


class DecompositionError(SchedulingError):
    """Decomposição degenerada: não há matching no suporte antes de zerar o resíduo"""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class SimulationAborted(SchedulingError):
    """Falha durante uma simulação; carrega o slot e um dump do estado"""

    def __init__(self, message: str, slot: int, state: Optional[Dict[str, Any]] = None):
        super().__init__(f"{message} at slot {slot}")
        self.slot = slot
        self.state = state or {}
