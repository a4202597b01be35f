"""
Dual attention vision backbone lab
Лаборатория магистрали с двойным вниманием
"""

__version__ = "1.0.0"
