# 置换不变集合函数工具包 (Hölder 幂平均 Deep Sets)
# 主应用包
