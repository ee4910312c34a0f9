# lodfm: 以 Linked Open Data 背景知识为特征的 Factorization Machine 与 BPR 排序学习
__version__ = "0.1.0"
