# utils package initializer
