"""
Serviços de escalonamento: filas, matching, politopo de schedules, aprendiz,
políticas e simulação
"""
