# 集合函数模型、训练、搜索与性质检查
