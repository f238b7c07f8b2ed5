# 数值、日志、配置与文件工具
